//! Independent oracles shared by the integration and acceptance suites.
//!
//! Nothing here calls into the closed forms under test except to obtain the
//! value being checked; every expected value is rebuilt from first principles.

#![allow(dead_code)]

use astro_float::{BigFloat, Consts, RoundingMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use steinrank::diffnet::nll_loss;
use steinrank::scoring::{self, Metric, Orientation, ScoringOptions};
use steinrank::stein::{self, KsdMode, ScoreTable};
use steinrank::{Activation, MlpModel, NetworkSpec};

pub const FD_STEP: f64 = 1e-5;

fn gauss(a: &[f64], b: &[f64], h: f64) -> f64 {
    let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-r2 / (2.0 * h * h)).exp()
}

fn nudged(v: &[f64], i: usize, by: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    out[i] += by;
    out
}

/// Sum of the four Stein kernel terms with every derivative of the base kernel
/// taken numerically. Also returns the sum of the terms' magnitudes, the scale
/// against which the residual is judged.
pub fn stein_kernel_fd(a: &[f64], b: &[f64], s_a: &[f64], s_b: &[f64], h: f64) -> (f64, f64) {
    let e = FD_STEP;
    let k = gauss(a, b, h);
    let mut cross_trace = 0.0;
    let mut grad_a_dot_sb = 0.0;
    let mut grad_b_dot_sa = 0.0;
    for i in 0..a.len() {
        let (ap, am) = (nudged(a, i, e), nudged(a, i, -e));
        let (bp, bm) = (nudged(b, i, e), nudged(b, i, -e));
        let da = (gauss(&ap, b, h) - gauss(&am, b, h)) / (2.0 * e);
        let db = (gauss(a, &bp, h) - gauss(a, &bm, h)) / (2.0 * e);
        let dab = (gauss(&ap, &bp, h) - gauss(&ap, &bm, h) - gauss(&am, &bp, h) + gauss(&am, &bm, h)) / (4.0 * e * e);
        cross_trace += dab;
        grad_a_dot_sb += da * s_b[i];
        grad_b_dot_sa += db * s_a[i];
    }
    let score_term = k * s_a.iter().zip(s_b).map(|(x, y)| x * y).sum::<f64>();
    let terms = [cross_trace, score_term, grad_a_dot_sb, grad_b_dot_sa];
    (terms.iter().sum(), terms.iter().map(|t| t.abs()).sum())
}

#[derive(Debug)]
pub struct SteinFdSummary {
    pub instances: usize,
    pub worst_rel_err: f64,
}

/// Compares the closed-form Stein kernel against [`stein_kernel_fd`] on
/// `per_dim` random instances for each dimension in `dims`.
pub fn stein_fd_sweep(dims: &[usize], per_dim: usize, seed: u64) -> SteinFdSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for &d in dims {
        for _ in 0..per_dim {
            let mut draw = |scale: f64| -> Vec<f64> { (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect() };
            let (a, b, s_a, s_b) = (draw(1.0), draw(1.0), draw(1.5), draw(1.5));
            let h = rng.random_range(0.5..2.0);
            let closed = stein::stein_kernel(&a, &b, &s_a, &s_b, h).expect("valid instance");
            let (fd, scale) = stein_kernel_fd(&a, &b, &s_a, &s_b, h);
            let rel = (closed - fd).abs() / closed.abs().max(fd.abs()).max(scale);
            worst = worst.max(rel);
            instances += 1;
        }
    }
    SteinFdSummary {
        instances,
        worst_rel_err: worst,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KsdRun {
    pub u_stat: f64,
    /// Standard error of the mean over the distinct off-diagonal pairs.
    pub std_err: f64,
}

/// KSD of `n` standard 2-D Gaussian draws against a Gaussian whose mean is
/// `shift` in every coordinate, using the analytic score `-(x - mu)`.
pub fn gaussian_ksd(n: usize, shift: f64, seed: u64) -> KsdRun {
    let d = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let scores: Vec<f64> = points.iter().map(|x| -(x - shift)).collect();
    let h = stein::median_bandwidth(&points, d).unwrap();
    let m = stein::stein_kernel_matrix_from_scores(&points, &scores, d, h, (0..n).collect()).unwrap();
    let u_stat = stein::ksd_statistic(&m, KsdMode::UStat).unwrap();
    let pairs: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| m.get(i, j)).collect();
    let count = pairs.len() as f64;
    let mean = pairs.iter().sum::<f64>() / count;
    let var = pairs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1.0);
    KsdRun {
        u_stat,
        std_err: (var / count).sqrt(),
    }
}

fn mean_nll(model: &MlpModel<f64>, x: &[f64], y: usize) -> f64 {
    nll_loss(&model.forward(x).unwrap(), y).unwrap()
}

#[derive(Debug)]
pub struct GradFdSummary {
    pub instances: usize,
    pub worst_params: f64,
    pub worst_input: f64,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Central differences against `grad_params` and `grad_input` on random tanh
/// networks; smooth activations keep every instance differentiable.
pub fn gradient_fd_sweep(instances: usize, seed: u64) -> GradFdSummary {
    let mut worst_params: f64 = 0.0;
    let mut worst_input: f64 = 0.0;
    for k in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + k);
        let spec = NetworkSpec::new(vec![3, 6, 5, 3], Activation::Tanh).unwrap();
        let params = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = MlpModel::from_params(spec, params).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = rng.random_range(0..3);
        let e = FD_STEP;

        let g = model.grad_params([(x.as_slice(), y)]).unwrap();
        for (i, gi) in g.iter().enumerate() {
            let up = model.with_params(nudged(model.params(), i, e)).unwrap();
            let down = model.with_params(nudged(model.params(), i, -e)).unwrap();
            let fd = (mean_nll(&up, &x, y) - mean_nll(&down, &x, y)) / (2.0 * e);
            worst_params = worst_params.max(rel_err(*gi, fd));
        }

        let gx = model.grad_input(&x, y).unwrap();
        for (j, gj) in gx.iter().enumerate() {
            let fd = (mean_nll(&model, &nudged(&x, j, -e), y) - mean_nll(&model, &nudged(&x, j, e), y)) / (2.0 * e);
            worst_input = worst_input.max(rel_err(*gj, fd));
        }
    }
    GradFdSummary {
        instances,
        worst_params,
        worst_input,
    }
}

/// Three 1-D samples with hand-set scores, gradient norms and predictions.
pub struct ThreePoint {
    pub points: [f64; 3],
    pub scores: [f64; 3],
    pub grad_norms: [f64; 3],
    pub probs: [[f64; 3]; 3],
    pub labels: [usize; 3],
    pub ids: [usize; 3],
}

impl ThreePoint {
    pub fn standard() -> Self {
        Self {
            points: [0.0, 0.75, 2.0],
            scores: [0.5, -1.25, 0.375],
            grad_norms: [0.4, 1.1, 0.05],
            probs: [[0.7, 0.2, 0.1], [0.3, 0.3, 0.4], [0.05, 0.9, 0.05]],
            labels: [0, 2, 1],
            ids: [4, 9, 2],
        }
    }

    pub fn table(&self) -> ScoreTable<f64> {
        ScoreTable {
            sample_ids: self.ids.to_vec(),
            dim: 1,
            num_classes: 3,
            input_scores: self.scores.to_vec(),
            param_grad_norms: self.grad_norms.to_vec(),
            probs: self.probs.concat(),
        }
    }
}

struct Big {
    p: usize,
    rm: RoundingMode,
    cc: Consts,
}

impl Big {
    fn new() -> Self {
        Self {
            p: 320,
            rm: RoundingMode::ToEven,
            cc: Consts::new().expect("constants cache"),
        }
    }

    fn of(&self, v: f64) -> BigFloat {
        BigFloat::from_f64(v, self.p)
    }

    fn add(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.add(b, self.p, self.rm)
    }

    fn sub(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.sub(b, self.p, self.rm)
    }

    fn mul(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.mul(b, self.p, self.rm)
    }

    fn div(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.div(b, self.p, self.rm)
    }

    fn exp(&mut self, a: &BigFloat) -> BigFloat {
        a.exp(self.p, self.rm, &mut self.cc)
    }

    fn ln(&mut self, a: &BigFloat) -> BigFloat {
        a.ln(self.p, self.rm, &mut self.cc)
    }

    fn sqrt(&self, a: &BigFloat) -> BigFloat {
        a.sqrt(self.p, self.rm)
    }

    fn sum(&self, v: &[BigFloat]) -> BigFloat {
        v.iter().fold(self.of(0.0), |acc, x| self.add(&acc, x))
    }
}

/// Scores and easy-to-hard order for every metric, evaluated in 320-bit arithmetic.
pub struct BigOracle {
    pub scores: Vec<(Metric, Vec<BigFloat>)>,
    pub orders: Vec<(Metric, Vec<usize>)>,
}

pub fn three_point_oracle(tp: &ThreePoint, h: f64) -> BigOracle {
    let mut b = Big::new();
    let n = 3;
    let hb = b.of(h);
    let h2 = b.mul(&hb, &hb);
    let h4 = b.mul(&h2, &h2);
    let two = b.of(2.0);
    let one = b.of(1.0);

    // Kernel entries straight from the four-term sum, derivatives worked by hand
    // for the 1-D Gaussian kernel: dk/da = -k*delta/h^2, dk/db = k*delta/h^2,
    // d2k/da db = k*(1/h^2 - delta^2/h^4).
    let mut kappa = vec![vec![b.of(0.0); n]; n];
    for i in 0..n {
        for j in 0..n {
            let delta = b.sub(&b.of(tp.points[i]), &b.of(tp.points[j]));
            let d2 = b.mul(&delta, &delta);
            let k = b.exp(&b.div(&d2, &b.mul(&two, &h2)).neg());
            let (sa, sb) = (b.of(tp.scores[i]), b.of(tp.scores[j]));
            let dk_da = b.div(&b.mul(&k, &delta), &h2).neg();
            let dk_db = b.div(&b.mul(&k, &delta), &h2);
            let cross = b.mul(&k, &b.sub(&b.div(&one, &h2), &b.div(&d2, &h4)));
            let terms = [cross, b.mul(&k, &b.mul(&sa, &sb)), b.mul(&dk_da, &sb), b.mul(&dk_db, &sa)];
            kappa[i][j] = b.sum(&terms);
        }
    }

    let mksd: Vec<BigFloat> = kappa.iter().map(|row| b.sum(row)).collect();

    let nb = b.of(n as f64);
    let mut msksd = Vec::new();
    for row in &kappa {
        let mean = b.div(&b.sum(row), &nb);
        let sq: Vec<BigFloat> = row
            .iter()
            .map(|v| {
                let c = b.sub(v, &mean);
                b.mul(&c, &c)
            })
            .collect();
        let std = b.sqrt(&b.div(&b.sum(&sq), &nb));
        let exps: Vec<BigFloat> = row.iter().map(|v| b.exp(&b.div(&b.sub(v, &mean), &std))).collect();
        msksd.push(b.sum(&exps));
    }

    let floor = b.of(ScoringOptions::default().entropy_floor);
    let mut emsksd = Vec::new();
    for (i, m) in msksd.iter().enumerate() {
        let terms: Vec<BigFloat> = tp.probs[i]
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| {
                let pb = b.of(p);
                let ln = b.ln(&pb);
                b.mul(&pb, &ln)
            })
            .collect();
        let mut h = b.sum(&terms).neg();
        if h.cmp(&floor).expect("comparable") < 0 {
            h = floor.clone();
        }
        emsksd.push(b.div(m, &h));
    }

    let ssn: Vec<BigFloat> = tp.grad_norms.iter().map(|&v| b.of(v)).collect();
    let pc: Vec<BigFloat> = (0..n).map(|i| b.of(tp.probs[i][tp.labels[i]])).collect();

    let scores = vec![
        (Metric::Mksd, mksd),
        (Metric::Msksd, msksd),
        (Metric::Ssn, ssn),
        (Metric::Emsksd, emsksd),
        (Metric::Pc, pc),
    ];
    let orders = scores
        .iter()
        .map(|(metric, s)| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&x, &y| {
                let c = s[x].cmp(&s[y]).expect("comparable").signum();
                let c = match metric_orientation(*metric) {
                    Orientation::HigherIsHarder => c,
                    Orientation::HigherIsEasier => -c,
                };
                c.cmp(&0).then(tp.ids[x].cmp(&tp.ids[y]))
            });
            (*metric, order.into_iter().map(|i| tp.ids[i]).collect())
        })
        .collect();
    BigOracle { scores, orders }
}

#[derive(Debug)]
pub struct ScoringCheck {
    pub worst_rel_err: f64,
    pub mismatched_rankings: Vec<Metric>,
}

/// Runs the library on [`ThreePoint::standard`] and compares with [`three_point_oracle`].
pub fn check_three_point() -> ScoringCheck {
    let tp = ThreePoint::standard();
    let table = tp.table();
    let h = stein::median_bandwidth(&tp.points, 1).unwrap();
    let m = stein::stein_kernel_matrix_from_scores(&tp.points, &tp.scores, 1, h, tp.ids.to_vec()).unwrap();
    let oracle = three_point_oracle(&tp, h);
    let labels = tp.labels.to_vec();
    let big = Big::new();
    let mut worst: f64 = 0.0;
    let mut mismatched = Vec::new();
    for ((metric, expected), (_, order)) in oracle.scores.iter().zip(&oracle.orders) {
        let ranking = scoring::score_metric(*metric, Some(&m), &table, &labels, &ScoringOptions::default()).unwrap();
        for (got, want) in ranking.scores.iter().zip(expected) {
            let diff = big.sub(&big.of(*got), want);
            let rel = big.div(&diff, want).abs();
            let rel: f64 = format!("{rel}").parse().expect("decimal rendering");
            worst = worst.max(rel);
        }
        if &ranking.easy_to_hard != order {
            mismatched.push(*metric);
        }
        assert_eq!(ranking.orientation, metric_orientation(*metric));
    }
    ScoringCheck {
        worst_rel_err: worst,
        mismatched_rankings: mismatched,
    }
}

fn metric_orientation(metric: Metric) -> Orientation {
    match metric {
        Metric::Ssn => Orientation::HigherIsEasier,
        _ => Orientation::HigherIsHarder,
    }
}
