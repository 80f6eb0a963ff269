//! The two training objectives over squared Euclidean distances.
//!
//! Per triplet row, with u = d(te_an, im_p), v = d(te_an, im_n),
//! w = d(te_an, te_n):
//!
//! * M3L:  alpha1 * u^rho / (v^rho + eps)  +  alpha2 * u^rho / (w^rho + eps)
//! * PATR: u + max(0, eta - v)
//!
//! Batch loss is the mean over rows (ascending row order). Gradients are
//! exact chain-rule derivatives with respect to the projected text vectors
//! te_an and (for M3L) te_n; image embeddings are frozen and get none.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Mat;
pub use crate::matrix::squared_distance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    M3l,
    Patr,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "m3l" => Ok(LossKind::M3l),
            "patr" => Ok(LossKind::Patr),
            other => Err(format!("unknown loss {other:?} (expected m3l or patr)")),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::M3l => write!(f, "m3l"),
            LossKind::Patr => write!(f, "patr"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Distance sensitivity exponent.
    pub rho: f64,
    /// Weight of the negative-image term.
    pub alpha1: f64,
    /// Weight of the negative-text term.
    pub alpha2: f64,
    /// PATR margin on the anchor/negative-image distance.
    pub eta: f64,
    /// Guard added to each M3L denominator.
    pub denom_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::M3l,
            rho: 4.0,
            alpha1: 0.5,
            alpha2: 1.0,
            eta: 1100.0,
            denom_eps: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.rho.is_finite() || self.rho <= 0.0 {
            return Err(Error::Config("rho must be positive".into()));
        }
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            return Err(Error::Config("alpha1/alpha2 must be non-negative".into()));
        }
        if !self.eta.is_finite() || self.eta <= 0.0 {
            return Err(Error::Config("eta must be positive".into()));
        }
        if self.denom_eps < 0.0 {
            return Err(Error::Config("denom_eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// The four row-aligned embedding roles of one mini-batch of triplets.
/// te_an and te_n are projected texts; im_p and im_n are frozen images.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub te_an: Mat,
    pub im_p: Mat,
    pub im_n: Mat,
    pub te_n: Mat,
}

impl TripletBatch {
    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.te_an.rows(), self.te_an.cols());
        for (name, m) in [("im_p", &self.im_p), ("im_n", &self.im_n), ("te_n", &self.te_n)] {
            if m.rows() != n || m.cols() != d {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    n,
                    d
                )));
            }
        }
        if n == 0 {
            return Err(Error::Validation("empty triplet batch".into()));
        }
        Ok(())
    }
}

/// Loss value plus gradients with respect to the projected text inputs.
/// `grad_te_n` is None for PATR, which ignores the negative text.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_te_an: Mat,
    pub grad_te_n: Option<Mat>,
}

/// x^p via exp(p ln x); zero (and any non-positive x) maps to zero.
fn pow_rho(x: f64, p: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        (p * x.ln()).exp()
    }
}

pub fn m3l_loss(batch: &TripletBatch, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    batch.validate()?;
    if cfg.kind != LossKind::M3l {
        return Err(Error::Config("loss config kind is not m3l".into()));
    }
    let (n, d) = (batch.te_an.rows(), batch.te_an.cols());
    let (rho, a1, a2, eps) = (cfg.rho, cfg.alpha1, cfg.alpha2, cfg.denom_eps);
    let inv_n = 1.0 / n as f64;

    let mut loss = 0.0;
    let mut g_an = Mat::zeros(n, d);
    let mut g_tn = Mat::zeros(n, d);

    for i in 0..n {
        let a = batch.te_an.row(i);
        let p = batch.im_p.row(i);
        let nim = batch.im_n.row(i);
        let tn = batch.te_n.row(i);

        let u = squared_distance(a, p);
        let v = squared_distance(a, nim);
        let w = squared_distance(a, tn);

        let pu = pow_rho(u, rho);
        let dv = pow_rho(v, rho) + eps;
        let dw = pow_rho(w, rho) + eps;
        loss += a1 * pu / dv + a2 * pu / dw;

        let dl_du = rho * pow_rho(u, rho - 1.0) * (a1 / dv + a2 / dw);
        let dl_dv = -a1 * pu * rho * pow_rho(v, rho - 1.0) / (dv * dv);
        let dl_dw = -a2 * pu * rho * pow_rho(w, rho - 1.0) / (dw * dw);

        let ga = g_an.row_mut(i);
        for j in 0..d {
            ga[j] = inv_n
                * (dl_du * 2.0 * (a[j] - p[j])
                    + dl_dv * 2.0 * (a[j] - nim[j])
                    + dl_dw * 2.0 * (a[j] - tn[j]));
        }
        let gt = g_tn.row_mut(i);
        for j in 0..d {
            gt[j] = inv_n * dl_dw * -2.0 * (a[j] - tn[j]);
        }
    }

    Ok(LossOutput {
        loss: loss * inv_n,
        grad_te_an: g_an,
        grad_te_n: Some(g_tn),
    })
}

pub fn patr_loss(batch: &TripletBatch, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    batch.validate()?;
    if cfg.kind != LossKind::Patr {
        return Err(Error::Config("loss config kind is not patr".into()));
    }
    let (n, d) = (batch.te_an.rows(), batch.te_an.cols());
    let inv_n = 1.0 / n as f64;

    let mut loss = 0.0;
    let mut g_an = Mat::zeros(n, d);

    for i in 0..n {
        let a = batch.te_an.row(i);
        let p = batch.im_p.row(i);
        let nim = batch.im_n.row(i);

        let u = squared_distance(a, p);
        let v = squared_distance(a, nim);
        let hinge = cfg.eta - v;
        // subgradient at the kink (v == eta) is 0
        let active = hinge > 0.0;
        loss += u + if active { hinge } else { 0.0 };

        let ga = g_an.row_mut(i);
        for j in 0..d {
            let mut g = 2.0 * (a[j] - p[j]);
            if active {
                g -= 2.0 * (a[j] - nim[j]);
            }
            ga[j] = inv_n * g;
        }
    }

    Ok(LossOutput {
        loss: loss * inv_n,
        grad_te_an: g_an,
        grad_te_n: None,
    })
}

/// Dispatch on `cfg.kind`.
pub fn triplet_loss(batch: &TripletBatch, cfg: &LossConfig) -> Result<LossOutput> {
    match cfg.kind {
        LossKind::M3l => m3l_loss(batch, cfg),
        LossKind::Patr => patr_loss(batch, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m3l_cfg(eps: f64) -> LossConfig {
        LossConfig {
            denom_eps: eps,
            ..LossConfig::default()
        }
    }

    fn patr_cfg(eta: f64) -> LossConfig {
        LossConfig {
            kind: LossKind::Patr,
            eta,
            ..LossConfig::default()
        }
    }

    /// One-row batch with prescribed distances u, v, w (1-d embeddings).
    fn batch_with_distances(u: f64, v: f64, w: f64) -> TripletBatch {
        TripletBatch {
            te_an: Mat::from_rows(&[vec![0.0]]),
            im_p: Mat::from_rows(&[vec![u.sqrt()]]),
            im_n: Mat::from_rows(&[vec![v.sqrt()]]),
            te_n: Mat::from_rows(&[vec![w.sqrt()]]),
        }
    }

    #[test]
    fn m3l_worked_scalar_example() {
        // u=1, v=2, w=4, rho=4, alpha1=0.5, alpha2=1, eps=0:
        // 0.5/16 + 1/256 = 0.03515625
        let out = m3l_loss(&batch_with_distances(1.0, 2.0, 4.0), &m3l_cfg(0.0)).unwrap();
        assert!((out.loss - 0.03515625).abs() <= 0.03515625 * 1e-12);
    }

    #[test]
    fn m3l_zero_positive_distance_gives_zero_loss() {
        let b = TripletBatch {
            te_an: Mat::from_rows(&[vec![1.0, 2.0]]),
            im_p: Mat::from_rows(&[vec![1.0, 2.0]]),
            im_n: Mat::from_rows(&[vec![3.0, 0.0]]),
            te_n: Mat::from_rows(&[vec![0.0, 5.0]]),
        };
        let out = m3l_loss(&b, &m3l_cfg(0.0)).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn m3l_equal_distances_give_alpha_sum() {
        for t in [0.5f64, 1.0, 7.0, 300.0] {
            let b = TripletBatch {
                te_an: Mat::from_rows(&[vec![0.0]]),
                im_p: Mat::from_rows(&[vec![t.sqrt()]]),
                im_n: Mat::from_rows(&[vec![-t.sqrt()]]),
                te_n: Mat::from_rows(&[vec![t.sqrt()]]),
            };
            let out = m3l_loss(&b, &m3l_cfg(0.0)).unwrap();
            assert_eq!(out.loss, 1.5, "t={t}");
        }
    }

    #[test]
    fn m3l_monotone_in_each_distance() {
        let cfg = m3l_cfg(0.0);
        let base = m3l_loss(&batch_with_distances(2.0, 3.0, 5.0), &cfg).unwrap().loss;
        let up_u = m3l_loss(&batch_with_distances(2.5, 3.0, 5.0), &cfg).unwrap().loss;
        let up_v = m3l_loss(&batch_with_distances(2.0, 3.5, 5.0), &cfg).unwrap().loss;
        let up_w = m3l_loss(&batch_with_distances(2.0, 3.0, 5.5), &cfg).unwrap().loss;
        assert!(up_u > base);
        assert!(up_v < base);
        assert!(up_w < base);
    }

    #[test]
    fn patr_worked_scalar_examples() {
        let cfg = patr_cfg(1100.0);
        let out = patr_loss(&batch_with_distances(1.0, 1200.0, 0.0), &cfg).unwrap();
        assert!((out.loss - 1.0).abs() <= 1e-12);

        let out = patr_loss(&batch_with_distances(0.0, 0.0, 0.0), &cfg).unwrap();
        assert!((out.loss - 1100.0).abs() <= 1100.0 * 1e-12);

        let out = patr_loss(&batch_with_distances(5.0, 100.0, 0.0), &cfg).unwrap();
        assert!((out.loss - 1005.0).abs() <= 1005.0 * 1e-12);
    }

    #[test]
    fn patr_saturated_hinge_leaves_only_positive_distance() {
        let cfg = patr_cfg(10.0);
        for v in [10.0, 11.0, 500.0] {
            let out = patr_loss(&batch_with_distances(3.0, v, 0.0), &cfg).unwrap();
            assert!((out.loss - 3.0).abs() <= 1e-12, "v={v}");
            // with the hinge off, the im_n direction contributes no gradient:
            // gradient equals the pure d(a,p) derivative 2(a-p)/n
            let expected = 2.0 * (0.0 - 3.0f64.sqrt());
            assert!((out.grad_te_an.row(0)[0] - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn losses_are_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let b = random_batch(&mut rng, 5, 4);
            assert!(m3l_loss(&b, &m3l_cfg(1e-8)).unwrap().loss >= 0.0);
            assert!(patr_loss(&b, &patr_cfg(3.0)).unwrap().loss >= 0.0);
        }
    }

    #[test]
    fn batch_loss_is_mean_of_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_batch(&mut rng, 6, 3);
        let cfg = m3l_cfg(1e-8);
        let whole = m3l_loss(&b, &cfg).unwrap().loss;
        let mut acc = 0.0;
        for i in 0..6 {
            let row = TripletBatch {
                te_an: b.te_an.gather(&[i]),
                im_p: b.im_p.gather(&[i]),
                im_n: b.im_n.gather(&[i]),
                te_n: b.te_n.gather(&[i]),
            };
            acc += m3l_loss(&row, &cfg).unwrap().loss;
        }
        assert!((whole - acc / 6.0).abs() <= 1e-12);
    }

    fn random_batch<R: Rng>(rng: &mut R, n: usize, d: usize) -> TripletBatch {
        let mut mat = |scale: f64| {
            let mut m = Mat::zeros(n, d);
            for v in m.as_mut_slice() {
                *v = (rng.random::<f64>() * 2.0 - 1.0) * scale;
            }
            m
        };
        TripletBatch {
            te_an: mat(1.0),
            im_p: mat(1.0),
            im_n: mat(1.0),
            te_n: mat(1.0),
        }
    }

    fn fd_check(batch: &TripletBatch, cfg: &LossConfig, check_te_n: bool) {
        let h = 1e-6;
        let out = triplet_loss(batch, cfg).unwrap();
        let eval = |b: &TripletBatch| triplet_loss(b, cfg).unwrap().loss;

        let mut b = batch.clone();
        for i in 0..b.te_an.rows() {
            for j in 0..b.te_an.cols() {
                let orig = b.te_an.row(i)[j];
                b.te_an.row_mut(i)[j] = orig + h;
                let up = eval(&b);
                b.te_an.row_mut(i)[j] = orig - h;
                let down = eval(&b);
                b.te_an.row_mut(i)[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = out.grad_te_an.row(i)[j];
                let diff = (an - fd).abs();
                assert!(
                    diff < 1e-9 || diff / an.abs().max(fd.abs()).max(1e-4) < 1e-6,
                    "te_an[{i}][{j}]: analytic {an} fd {fd}"
                );
            }
        }
        if check_te_n {
            let g_tn = out.grad_te_n.as_ref().unwrap();
            for i in 0..b.te_n.rows() {
                for j in 0..b.te_n.cols() {
                    let orig = b.te_n.row(i)[j];
                    b.te_n.row_mut(i)[j] = orig + h;
                    let up = eval(&b);
                    b.te_n.row_mut(i)[j] = orig - h;
                    let down = eval(&b);
                    b.te_n.row_mut(i)[j] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = g_tn.row(i)[j];
                    let diff = (an - fd).abs();
                    assert!(
                        diff < 1e-9 || diff / an.abs().max(fd.abs()).max(1e-4) < 1e-6,
                        "te_n[{i}][{j}]: analytic {an} fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn m3l_gradients_match_finite_differences() {
        // moderate dimension keeps distance ratios near 1 so the ratio-form
        // loss stays O(1) and finite differences stay well conditioned
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let b = random_batch(&mut rng, 4, 16);
            fd_check(&b, &m3l_cfg(1e-8), true);
            fd_check(&b, &m3l_cfg(0.0), true);
        }
    }

    #[test]
    fn patr_gradients_match_finite_differences_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let b = random_batch(&mut rng, 4, 16);
            // pick eta strictly between observed negative distances, away
            // from every kink
            let mut vs: Vec<f64> = (0..4)
                .map(|i| squared_distance(b.te_an.row(i), b.im_n.row(i)))
                .collect();
            vs.sort_by(f64::total_cmp);
            let mut eta = (vs[1] + vs[2]) / 2.0;
            while vs.iter().any(|v| (v - eta).abs() < 1e-3) {
                eta += 0.01;
            }
            fd_check(&b, &patr_cfg(eta), false);
        }
    }

    #[test]
    fn m3l_scale_invariance_with_default_eps_is_tiny_on_unit_data() {
        // distances stay O(1) even at the smallest scale factor, where the
        // denominator guard has its largest relative effect
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut b = random_batch(&mut rng, 8, 16);
        for m in [&mut b.te_an, &mut b.im_p, &mut b.im_n, &mut b.te_n] {
            for v in m.as_mut_slice() {
                *v *= 3.0;
            }
        }
        let cfg = m3l_cfg(1e-8);
        let base = m3l_loss(&b, &cfg).unwrap().loss;
        for c in [0.1, 3.0, 100.0] {
            let scale = |m: &Mat| {
                let mut s = m.clone();
                for v in s.as_mut_slice() {
                    *v *= c;
                }
                s
            };
            let sb = TripletBatch {
                te_an: scale(&b.te_an),
                im_p: scale(&b.im_p),
                im_n: scale(&b.im_n),
                te_n: scale(&b.te_n),
            };
            let scaled = m3l_loss(&sb, &cfg).unwrap().loss;
            assert!(
                (scaled - base).abs() < 1e-6,
                "c={c}: {scaled} vs {base}"
            );
        }
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let b = TripletBatch {
            te_an: Mat::zeros(2, 3),
            im_p: Mat::zeros(2, 3),
            im_n: Mat::zeros(2, 4),
            te_n: Mat::zeros(2, 3),
        };
        assert!(matches!(
            m3l_loss(&b, &m3l_cfg(0.0)),
            Err(crate::Error::Shape(_))
        ));
    }
}
