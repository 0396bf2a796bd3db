// scratch probe - will be deleted
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rhotic::synth::{resonator_clip, ResonatorSpec};
use rhotic::tracking::{search_ceiling_pass1, track, pass1_grid};

fn recovery_error(clip: &rhotic::dsp::AudioClip, ceiling: f64, truth: &[f64; 3]) -> f64 {
    let t = track(clip, ceiling, "u").unwrap();
    let mut total = 0.0;
    for k in 0..3 {
        let mut errs: Vec<f64> = t.frames.iter().filter(|f| !f.missing)
            .map(|f| (f.frequencies[k] - truth[k]).abs() / truth[k]).collect();
        if errs.is_empty() { return f64::INFINITY; }
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        total += errs[errs.len() / 2];
    }
    total / 3.0
}

fn parasite_clip(f1: f64, f2: f64, f3: f64, seed: u64) -> rhotic::dsp::AudioClip {
    let resonances = vec![
        (f1, 40.0),
        (f2, 70.0),
        ((f2 + f3) / 2.0, 550.0), // weak parasite between F2 and F3
        (f3, 100.0),
        (f3 + 950.0, 180.0),
        (f3 + 1750.0, 220.0),
    ];
    resonator_clip(
        &ResonatorSpec { resonances, f0: 125.0, duration: 0.5, noise_level: 0.08, sample_rate: 44_100.0 },
        seed,
    )
}

fn main() {
    let mut wins = 0;
    let n_trials = 20;
    for trial in 0..n_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let f1: f64 = rng.gen_range(420.0..620.0);
        let f2: f64 = rng.gen_range(1300.0..1800.0);
        let f3: f64 = rng.gen_range(2300.0..2900.0);
        let clip = parasite_clip(f1, f2, f3, 1000 + trial);
        let result = search_ceiling_pass1(&clip, "u").unwrap();
        let truth = [f1, f2, f3];
        let winner_err = recovery_error(&clip, result.winning_ceiling, &truth);
        let mut best = f64::INFINITY;
        let mut errs = Vec::new();
        for c in pass1_grid() {
            let e = recovery_error(&clip, c, &truth);
            errs.push((c, e));
            best = best.min(e);
        }
        let ok = winner_err <= best + 1e-12;
        if ok { wins += 1; }
        println!(
            "trial {trial}: win={} w={:.4} best={:.4} {} | {:?}",
            result.winning_ceiling, winner_err, best, if ok { "OK" } else { "MISS" },
            errs.iter().map(|(c, e)| format!("{}:{:.3}", *c as u32 / 100, e)).collect::<Vec<_>>()
        );
    }
    println!("{wins}/{n_trials}");
}
