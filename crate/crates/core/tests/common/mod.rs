#![allow(dead_code)]

use mnbr::model::{Cluster, LongitudinalDataset, ThetaParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use std::path::PathBuf;

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

/// Seizure counts with design (1, progabide, period, progabide:period) and
/// offset log(weeks).
pub fn seizures() -> LongitudinalDataset<f64> {
    let text = std::fs::read_to_string(data_path("seizures.csv")).expect("seizures.csv");
    let mut clusters: Vec<(String, Vec<u64>, Vec<Vec<f64>>, Vec<f64>)> = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let trt = if f[2] == "progabide" { 1.0 } else { 0.0 };
        let period: f64 = f[3].parse().unwrap();
        let weeks: f64 = f[4].parse().unwrap();
        if clusters.last().map(|c| c.0 != f[0]).unwrap_or(true) {
            clusters.push((f[0].to_string(), vec![], vec![], vec![]));
        }
        let c = clusters.last_mut().unwrap();
        c.1.push(f[1].parse().unwrap());
        c.2.push(vec![1.0, trt, period, trt * period]);
        c.3.push(weeks.ln());
    }
    let clusters = clusters
        .into_iter()
        .map(|(id, y, x, o)| Cluster::new(id, y, x, o).unwrap())
        .collect();
    LongitudinalDataset::new(
        clusters,
        ["(Intercept)", "trt", "period", "trt:period"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    )
    .unwrap()
}

/// Draws counts from the model itself: gamma frailty, then Poisson.
pub fn synthetic(seed: u64, n: usize, m: usize, theta: &ThetaParams<f64>) -> LongitudinalDataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = theta.beta.len();
    let frailty = Gamma::new(theta.phi, 1.0 / theta.phi).unwrap();
    let clusters = (0..n)
        .map(|i| {
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|_| {
                    let mut r = vec![1.0];
                    r.extend((1..p).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5));
                    r
                })
                .collect();
            let offset: Vec<f64> = (0..m).map(|_| rng.random_range(-0.3..0.3)).collect();
            let g = frailty.sample(&mut rng);
            let y = rows
                .iter()
                .zip(&offset)
                .map(|(r, o)| {
                    let eta: f64 = r.iter().zip(&theta.beta).map(|(x, b)| x * b).sum::<f64>() + o;
                    let lam = eta.exp() * g;
                    if lam > 0.0 {
                        Poisson::new(lam).unwrap().sample(&mut rng) as u64
                    } else {
                        0
                    }
                })
                .collect();
            Cluster::new(format!("s{i}"), y, rows, offset).unwrap()
        })
        .collect();
    let names = (0..p).map(|k| format!("x{k}")).collect();
    LongitudinalDataset::new(clusters, names).unwrap()
}

/// Every cluster twice.
pub fn duplicated(data: &LongitudinalDataset<f64>) -> LongitudinalDataset<f64> {
    let mut clusters = data.clusters().to_vec();
    clusters.extend(data.clusters().iter().map(|c| {
        Cluster::new(
            format!("{}'", c.id()),
            c.counts().to_vec(),
            (0..c.len()).map(|j| c.design_row(j).to_vec()).collect(),
            c.offset().to_vec(),
        )
        .unwrap()
    }));
    LongitudinalDataset::new(clusters, data.covariate_names().to_vec()).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}
