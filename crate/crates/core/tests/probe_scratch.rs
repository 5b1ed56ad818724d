// Temporary diagnostic: probe whether trained interest states carry the
// regime class. Run with: cargo test -p timgen --release --test probe_scratch -- --ignored --nocapture

use timgen::dataset::read_dataset;
use timgen::model::{examples_per_step, infer};
use timgen::synthetic::GroundTruth;
use timgen::training::checkpoint::load_checkpoint;
use timgen::training::split_sequences;

fn class_means(vectors: &[(Vec<f64>, usize)], classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (v, c) in vectors {
        for (s, x) in sums[*c].iter_mut().zip(v) {
            *s += x;
        }
        counts[*c] += 1;
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            for x in s.iter_mut() {
                *x /= n as f64;
            }
        }
    }
    sums
}

fn nearest(v: &[f64], means: &[Vec<f64>]) -> usize {
    means
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let da: f64 = a.1.iter().zip(v).map(|(m, x)| (m - x) * (m - x)).sum();
            let db: f64 = b.1.iter().zip(v).map(|(m, x)| (m - x) * (m - x)).sum();
            da.total_cmp(&db)
        })
        .map(|(i, _)| i)
        .unwrap()
}

fn probe(ckpt: &str, data: &str, truth_path: &str) {
    let (params, cfg) = load_checkpoint(std::path::Path::new(ckpt)).unwrap();
    let sequences = read_dataset(std::path::Path::new(data)).unwrap();
    let truth = GroundTruth::load(std::path::Path::new(truth_path)).unwrap();
    let split = split_sequences(sequences, cfg.seed);

    let collect = |seqs: &[(String, Vec<timgen::encoding::Interaction>)]| {
        let mut z = Vec::new();
        let mut mu = Vec::new();
        for (user, seq) in seqs.iter().take(60) {
            for ex in examples_per_step(seq, &cfg).unwrap() {
                let (_, detail) = infer(&params, &cfg, &ex.prefix, &ex.candidate).unwrap();
                let class = truth.lookup(user, ex.step).unwrap().class;
                z.push((detail.z_t.clone(), class));
                mu.push((detail.mu.clone(), class));
            }
        }
        (z, mu)
    };
    let (ztr, mtr) = collect(&split.train);
    let (zte, mte) = collect(&split.test);

    let zdim = ztr[0].0.len();
    let mdim = mtr[0].0.len();
    let zm = class_means(&ztr, cfg.classes, zdim);
    let mm = class_means(&mtr, cfg.classes, mdim);
    let acc = |test: &[(Vec<f64>, usize)], means: &[Vec<f64>]| {
        let hits = test.iter().filter(|(v, c)| nearest(v, means) == *c).count();
        hits as f64 / test.len() as f64
    };
    println!(
        "{ckpt}: z_t probe accuracy {:.4}, mu probe accuracy {:.4} ({} test steps)",
        acc(&zte, &zm),
        acc(&mte, &mm),
        zte.len()
    );
}

#[test]
#[ignore]
fn probe_trained_states() {
    probe(
        "/tmp/timgen-smoke/d7_full.bin",
        "/tmp/timgen-smoke/drift6/dataset.tsv",
        "/tmp/timgen-smoke/drift6/truth.tsv",
    );
    probe(
        "/tmp/timgen-smoke/d7_base.bin",
        "/tmp/timgen-smoke/drift6/dataset.tsv",
        "/tmp/timgen-smoke/drift6/truth.tsv",
    );
}
