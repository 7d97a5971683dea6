use std::time::Instant;

use amar::config::{Preset, RunConfig};
use amar::edge_cloud::bandwidth_report;
use amar::matching::{hungarian, hypothesis_space};
use amar::rvq::capacity;
use amar::{Model, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZES: [usize; 6] = [10, 20, 30, 40, 50, 60];

pub fn bench(cfg: &RunConfig) -> Result<()> {
    params(cfg)?;
    println!();
    matching_scaling()?;
    println!();
    println!("capacity K^V");
    print!("{:>6}", "K \\ V");
    let vs = [1u32, 2, 4, 6, 8];
    for v in vs {
        print!(" {v:>20}");
    }
    println!();
    for k in [8u64, 16, 32] {
        print!("{k:>6}");
        for v in vs {
            match capacity(k, v) {
                Ok(c) => print!(" {c:>20}"),
                Err(_) => print!(" {:>20}", "overflow"),
            }
        }
        println!();
    }
    let (ordered, multisets) = hypothesis_space(9, 5);
    println!(
        "\nlabel hypotheses for 9 activities, 5 people: {ordered} ordered vs {multisets} multisets ({:.1}x)",
        ordered as f64 / multisets as f64
    );
    let m = &cfg.model;
    let here = bandwidth_report(
        cfg.tokens(),
        m.backbone.d(),
        m.rvq.layers,
        m.rvq.codebook_size,
        32,
    )?;
    println!("bandwidth (this config): {here}");
    let p = RunConfig::preset(Preset::Paper);
    let paper = bandwidth_report(
        p.tokens(),
        p.model.backbone.d(),
        p.model.rvq.layers,
        p.model.rvq.codebook_size,
        32,
    )?;
    println!("bandwidth (paper preset): {paper}");
    Ok(())
}

fn params(cfg: &RunConfig) -> Result<()> {
    let model = Model::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let backbone = model.params.count_trainable("backbone.");
    let codebooks = model.params.count_trainable("rvq.");
    let total = model.params.count_trainable("");
    let head = total - backbone - codebooks;
    println!("parameters");
    for (name, n) in [
        ("backbone (edge)", backbone),
        ("codebooks", codebooks),
        ("transformer (cloud)", head),
        ("complete", total),
    ] {
        println!("{name:<20} {n:>9} ({:.3} M)", n as f64 / 1e6);
    }
    Ok(())
}

/// Median time of the assignment solver on random `n x n` costs, and the
/// least-squares exponent of time against `n`.
fn matching_scaling() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut times = Vec::new();
    println!("hungarian matching");
    for n in SIZES {
        let reps = (20_000 / (n * n)).max(5);
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen::<f64>()).collect())
                .collect();
            let start = Instant::now();
            hungarian(&cost)?;
            samples.push(start.elapsed().as_secs_f64());
        }
        samples.sort_by(f64::total_cmp);
        let t = samples[samples.len() / 2];
        println!("n = {n:>3}: {:>10.1} us", t * 1e6);
        times.push(t);
    }
    let xs: Vec<f64> = SIZES.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let (mx, my) = (mean(&xs), mean(&ys));
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
    let ratio = times[5] / times[2];
    println!("t(60)/t(30) = {ratio:.2}, fitted exponent {slope:.2}");
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
