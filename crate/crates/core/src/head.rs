//! Categorical dueling head: combine value and advantage logits into per-action
//! distributions over a fixed atom support, take expectations, project
//! Bellman targets back onto the support and score them with cross-entropy.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomSupport {
    n_atoms: usize,
    v_min: f64,
    v_max: f64,
    atoms: Vec<f64>,
    delta: f64,
}

impl AtomSupport {
    pub fn new(n_atoms: usize, v_min: f64, v_max: f64) -> Result<Self> {
        if n_atoms < 2 {
            return Err(Error::Argument(format!("need at least 2 atoms, got {n_atoms}")));
        }
        if !(v_min < v_max) || !v_min.is_finite() || !v_max.is_finite() {
            return Err(Error::Argument(format!("invalid support bounds [{v_min}, {v_max}]")));
        }
        let delta = (v_max - v_min) / (n_atoms - 1) as f64;
        let atoms = (0..n_atoms).map(|i| v_min + i as f64 * delta).collect();
        Ok(AtomSupport { n_atoms, v_min, v_max, atoms, delta })
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Same spacing with every atom moved by `c`.
    pub fn shifted(&self, c: f64) -> Self {
        AtomSupport {
            n_atoms: self.n_atoms,
            v_min: self.v_min + c,
            v_max: self.v_max + c,
            atoms: self.atoms.iter().map(|z| z + c).collect(),
            delta: self.delta,
        }
    }
}

/// `probs[a][i]`: probability of atom `i` under action `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalValueDistribution {
    pub probs: Array2<f64>,
}

impl CategoricalValueDistribution {
    pub fn n_actions(&self) -> usize {
        self.probs.nrows()
    }

    pub fn row(&self, action: usize) -> ArrayView1<'_, f64> {
        self.probs.row(action)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DuelingLogits {
    pub value_logits: Array1<f64>,
    /// actions × atoms
    pub advantage_logits: Array2<f64>,
    pub advantage_mean: Array1<f64>,
}

impl DuelingLogits {
    pub fn new(value_logits: Array1<f64>, advantage_logits: Array2<f64>) -> Result<Self> {
        if advantage_logits.ncols() != value_logits.len() || advantage_logits.nrows() == 0 {
            return Err(Error::Argument(format!(
                "advantage logits {:?} do not match {} value atoms",
                advantage_logits.dim(),
                value_logits.len()
            )));
        }
        let n = advantage_logits.nrows() as f64;
        let advantage_mean = advantage_logits.sum_axis(Axis(0)) / n;
        Ok(DuelingLogits { value_logits, advantage_logits, advantage_mean })
    }

    /// `v_i + a_i(a) − ā_i` for every action and atom.
    pub fn combined(&self) -> Array2<f64> {
        let mut out = self.advantage_logits.clone();
        for mut row in out.rows_mut() {
            for ((x, v), m) in row.iter_mut().zip(&self.value_logits).zip(&self.advantage_mean) {
                *x = v + *x - m;
            }
        }
        out
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let shifted = logits.mapv(|x| x - max);
    let log_z = shifted.mapv(f64::exp).sum().ln();
    shifted.mapv(|x| x - log_z)
}

fn softmax_row(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = logits.mapv(|x| (x - max).exp());
    let z = e.sum();
    e / z
}

/// Per-action softmax over atoms of the dueling combination.
pub fn dueling_combine(logits: &DuelingLogits) -> Result<CategoricalValueDistribution> {
    let finite = logits.value_logits.iter().chain(logits.advantage_logits.iter()).all(|x| x.is_finite());
    if !finite {
        return Err(Error::Numeric("non-finite logits in dueling head".into()));
    }
    let combined = logits.combined();
    let mut probs = Array2::zeros(combined.raw_dim());
    for (src, mut dst) in combined.rows().into_iter().zip(probs.rows_mut()) {
        dst.assign(&softmax_row(src));
    }
    Ok(CategoricalValueDistribution { probs })
}

/// `Q(a) = Σ_i z_i p_i(a)`
pub fn expected_q(dist: &CategoricalValueDistribution, support: &AtomSupport) -> Vec<f64> {
    let z = ArrayView1::from(support.atoms());
    dist.probs.rows().into_iter().map(|row| row.dot(&z)).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

const ATOM_SNAP: f64 = 1e-12;

/// Categorical projection of `reward + discount·Z` onto `support`.
///
/// With `truncated` set the bootstrap term is dropped and all mass lands on
/// `clamp(reward)`. Mass at a point between two atoms is split linearly; a
/// point that coincides with an atom goes entirely to that atom.
pub fn project_target(dist_row: &[f64], support: &AtomSupport, reward: f64, discount: f64, truncated: bool) -> Vec<f64> {
    let n = support.n_atoms();
    let mut out = vec![0.0; n];
    if truncated {
        // Every atom lands on `reward`; treat the row as the unit mass it is
        // so the target does not depend on the network at all.
        deposit(&mut out, support, reward, 1.0);
        return out;
    }
    for (&p, &z) in dist_row.iter().zip(support.atoms()) {
        if p != 0.0 {
            deposit(&mut out, support, reward + discount * z, p);
        }
    }
    out
}

/// Split mass `p` at return `tz` between the two nearest atoms.
fn deposit(out: &mut [f64], support: &AtomSupport, tz: f64, p: f64) {
    let n = out.len();
    let tz = tz.clamp(support.v_min(), support.v_max());
    let mut b = ((tz - support.v_min()) / support.delta()).clamp(0.0, (n - 1) as f64);
    // absorb rounding noise from recomputing an atom's own position
    if (b - b.round()).abs() <= ATOM_SNAP {
        b = b.round();
    }
    let lo = b.floor();
    let hi = b.ceil();
    if lo == hi {
        out[lo as usize] += p;
    } else {
        out[lo as usize] += p * (hi - b);
        out[hi as usize] += p * (b - lo);
    }
}

/// Cross-entropy `−Σ target_i · log p_i` and its gradient with respect to the
/// logits that produced `online_log_probs` (`softmax − target`).
pub fn kl_loss(target: &[f64], online_log_probs: &[f64]) -> (f64, Vec<f64>) {
    let loss = -target.iter().zip(online_log_probs).map(|(t, lp)| if *t == 0.0 { 0.0 } else { t * lp }).sum::<f64>();
    let seed = target.iter().zip(online_log_probs).map(|(t, lp)| lp.exp() - t).collect();
    (loss, seed)
}

/// Push a gradient on the chosen action's combined logits back to the value
/// and advantage logits. Returns `(d_value, d_advantage)` with the advantage
/// gradient laid out action-major (`actions × atoms`).
pub fn dueling_backward(seed: &[f64], action: usize, n_actions: usize) -> (Vec<f64>, Vec<f64>) {
    let n_atoms = seed.len();
    let d_value = seed.to_vec();
    let inv = 1.0 / n_actions as f64;
    let mut d_adv = vec![0.0; n_actions * n_atoms];
    for a in 0..n_actions {
        let own = if a == action { 1.0 } else { 0.0 };
        for i in 0..n_atoms {
            d_adv[a * n_atoms + i] = seed[i] * (own - inv);
        }
    }
    (d_value, d_adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_advantages_reduce_to_value_softmax() {
        let v = array![0.3, -1.0, 2.0];
        let a = array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]];
        let d = dueling_combine(&DuelingLogits::new(v.clone(), a).unwrap()).unwrap();
        let want = softmax_row(v.view());
        for row in d.probs.rows() {
            for (x, y) in row.iter().zip(&want) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_logits_are_uniform() {
        let d = dueling_combine(&DuelingLogits::new(Array1::zeros(4), Array2::zeros((6, 4))).unwrap()).unwrap();
        assert!(d.probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_by_two_hand_softmax() {
        let l = DuelingLogits::new(array![0.0, 0.0], array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(l.advantage_mean, array![0.5, 0.5]);
        let d = dueling_combine(&l).unwrap();
        let s = 0.5f64.exp() / (0.5f64.exp() + (-0.5f64).exp());
        assert!((s - 0.7311).abs() < 1e-4);
        assert!((d.probs[[0, 0]] - s).abs() < 1e-15);
        assert!((d.probs[[0, 1]] - (1.0 - s)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let l = DuelingLogits::new(array![f64::NAN, 0.0], array![[0.0, 0.0]]).unwrap();
        assert!(matches!(dueling_combine(&l), Err(Error::Numeric(_))));
    }

    #[test]
    fn expectation_examples() {
        let s = AtomSupport::new(5, -10.0, 10.0).unwrap();
        let mut probs = Array2::zeros((1, 5));
        probs[[0, 3]] = 1.0;
        assert_eq!(expected_q(&CategoricalValueDistribution { probs }, &s), vec![5.0]);
        let uniform = CategoricalValueDistribution { probs: Array2::from_elem((2, 5), 0.2) };
        assert!(expected_q(&uniform, &s).iter().all(|q| q.abs() < 1e-15));
        let two = AtomSupport::new(2, 0.0, 4.0).unwrap();
        let d = CategoricalValueDistribution { probs: array![[0.25, 0.75]] };
        assert_eq!(expected_q(&d, &two), vec![3.0]);
    }

    #[test]
    fn projection_examples() {
        let s = AtomSupport::new(5, -2.0, 2.0).unwrap();
        let row = [0.1, 0.2, 0.3, 0.25, 0.15];
        assert_eq!(project_target(&row, &s, 0.0, 1.0, false), row.to_vec());
        assert_eq!(project_target(&row, &s, 1.0, 0.9, true), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        let s3 = AtomSupport::new(3, 0.0, 2.0).unwrap();
        assert_eq!(project_target(&[0.0, 1.0, 0.0], &s3, 0.5, 1.0, false), vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn projection_clamps_out_of_range() {
        let s = AtomSupport::new(3, 0.0, 2.0).unwrap();
        assert_eq!(project_target(&[0.5, 0.0, 0.5], &s, 100.0, 1.0, false), vec![0.0, 0.0, 1.0]);
        assert_eq!(project_target(&[0.5, 0.0, 0.5], &s, -100.0, 1.0, false), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, _) = kl_loss(&[0.0, 1.0, 0.0, 0.0], &[(0.25f64).ln(); 4]);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        let (loss, seed) = kl_loss(&[0.5, 0.5], &[0.9f64.ln(), 0.1f64.ln()]);
        assert!((loss - 1.2040).abs() < 1e-4);
        assert!((seed[0] - 0.4).abs() < 1e-15 && (seed[1] + 0.4).abs() < 1e-15);
        // target equal to online: loss is the entropy
        let p = [0.2, 0.3, 0.5];
        let lp: Vec<f64> = p.iter().map(|x: &f64| x.ln()).collect();
        let entropy = -p.iter().map(|x| x * x.ln()).sum::<f64>();
        assert!((kl_loss(&p, &lp).0 - entropy).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]), 2);
        assert_eq!(argmax(&[3.0; 6]), 0);
    }

    #[test]
    fn support_layout() {
        let s = AtomSupport::new(51, -10.0, 10.0).unwrap();
        assert_eq!(s.delta(), 0.4);
        assert_eq!(s.atoms()[0], -10.0);
        assert!((s.atoms()[50] - 10.0).abs() < 1e-12);
        assert!(s.atoms().windows(2).all(|w| w[0] < w[1]));
        assert!(AtomSupport::new(1, 0.0, 1.0).is_err());
        assert!(AtomSupport::new(3, 1.0, 1.0).is_err());
    }

    mod props {
        use super::*;
        use ndarray::{Array1, Array2};
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn projection_conserves_mass(
                raw in proptest::collection::vec(0.0f64..1.0, 2..20),
                reward in -30f64..30.0,
                discount in 0f64..1.0,
                truncated in any::<bool>(),
            ) {
                let total: f64 = raw.iter().sum::<f64>() + 1e-9;
                let p: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / raw.len() as f64) / total).collect();
                let support = AtomSupport::new(p.len(), -10.0, 10.0).unwrap();
                let out = project_target(&p, &support, reward, discount, truncated);
                prop_assert_eq!(out.len(), p.len());
                prop_assert!(out.iter().all(|&v| v >= 0.0));
                prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn dueling_rows_are_distributions(
                v in proptest::collection::vec(-20f64..20.0, 5),
                a in proptest::collection::vec(-20f64..20.0, 15),
                shift in -5f64..5.0,
            ) {
                let adv = Array2::from_shape_vec((3, 5), a).unwrap();
                let d = dueling_combine(&DuelingLogits::new(Array1::from(v.clone()), adv.clone()).unwrap()).unwrap();
                for k in 0..3 {
                    let row = d.row(k);
                    prop_assert!(row.iter().all(|&x| x >= 0.0));
                    prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                }
                let shifted = dueling_combine(&DuelingLogits::new(Array1::from(v), adv + shift).unwrap()).unwrap();
                for k in 0..3 {
                    for (x, y) in d.row(k).iter().zip(shifted.row(k)) {
                        prop_assert!((x - y).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
