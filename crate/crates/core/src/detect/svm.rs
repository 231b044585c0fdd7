use serde::{Deserialize, Serialize};

use super::DetectError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    /// Hinge-loss weight.
    pub c: f64,
    pub max_epochs: usize,
    /// Stop when the largest projected-gradient violation drops below this.
    pub tol: f64,
    /// Features are rescaled so their mean L2 norm over the training set is
    /// this value; `0` disables rescaling.
    pub target_norm: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 0.01,
            max_epochs: 500,
            tol: 1e-4,
            target_norm: 10.0,
        }
    }
}

/// Binary linear classifier `w . x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearSvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.b + self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
    }
}

/// Per-epoch objectives of the dual coordinate method.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SvmTrace {
    /// Dual objective after each epoch; never decreases.
    pub dual: Vec<f64>,
    /// Primal objective after each epoch.
    pub primal: Vec<f64>,
    pub converged: bool,
}

/// `0.5 |w|^2 + 0.5 b^2 + C sum max(0, 1 - y (w.x + b))`. The bias is
/// regularized like a weight on a constant feature.
pub fn svm_primal(x: &[Vec<f64>], y: &[f64], c: f64, svm: &LinearSvm) -> f64 {
    let reg = 0.5 * (svm.w.iter().map(|v| v * v).sum::<f64>() + svm.b * svm.b);
    let hinge: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| (1.0 - yi * svm.decision(xi)).max(0.0))
        .sum();
    reg + c * hinge
}

/// Dual coordinate descent for the L1-loss linear SVM, visiting samples in
/// index order every epoch. Labels are `+1` / `-1`.
pub fn train_binary_svm(
    x: &[Vec<f64>],
    y: &[f64],
    c: f64,
    max_epochs: usize,
    tol: f64,
) -> Result<(LinearSvm, SvmTrace), DetectError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(DetectError::Config(format!(
            "svm needs matching non-empty data, got {} rows and {} labels",
            x.len(),
            y.len()
        )));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(DetectError::Config(format!(
            "svm C must be positive, got {c}"
        )));
    }
    let d = x[0].len();
    if let Some(r) = x.iter().find(|r| r.len() != d) {
        return Err(DetectError::Config(format!(
            "feature rows of width {d} and {}",
            r.len()
        )));
    }
    let qii: Vec<f64> = x
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0)
        .collect();
    let mut alpha = vec![0.0; x.len()];
    let mut svm = LinearSvm {
        w: vec![0.0; d],
        b: 0.0,
    };
    let mut trace = SvmTrace::default();
    for _ in 0..max_epochs {
        let mut max_violation: f64 = 0.0;
        for i in 0..x.len() {
            let g = y[i] * svm.decision(&x[i]) - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= c {
                g.max(0.0)
            } else {
                g
            };
            max_violation = max_violation.max(pg.abs());
            if pg != 0.0 {
                let new = (alpha[i] - g / qii[i]).clamp(0.0, c);
                let step = (new - alpha[i]) * y[i];
                alpha[i] = new;
                for (w, v) in svm.w.iter_mut().zip(&x[i]) {
                    *w += step * v;
                }
                svm.b += step;
            }
        }
        let norm2 = svm.w.iter().map(|v| v * v).sum::<f64>() + svm.b * svm.b;
        trace.dual.push(alpha.iter().sum::<f64>() - 0.5 * norm2);
        trace.primal.push(svm_primal(x, y, c, &svm));
        if max_violation < tol {
            trace.converged = true;
            break;
        }
    }
    Ok((svm, trace))
}

/// One-vs-all linear SVMs over NoC features. Category `c` is trained with
/// samples labelled `Some(c)` as positives and everything else as negatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmHead {
    /// `None` for categories that had no positives.
    pub heads: Vec<Option<LinearSvm>>,
    pub c: f64,
    /// Multiplier applied to features before the linear map.
    pub feature_scale: f64,
}

impl SvmHead {
    pub fn num_categories(&self) -> usize {
        self.heads.len()
    }

    /// Decision value per category; missing heads score `-inf`.
    pub fn scores(&self, feature: &[f32]) -> Vec<f64> {
        let x: Vec<f64> = feature
            .iter()
            .map(|&v| v as f64 * self.feature_scale)
            .collect();
        self.heads
            .iter()
            .map(|h| h.as_ref().map_or(f64::NEG_INFINITY, |h| h.decision(&x)))
            .collect()
    }
}

pub fn train_svm(
    features: &[Vec<f32>],
    labels: &[Option<usize>],
    n_categories: usize,
    config: &SvmConfig,
) -> Result<SvmHead, DetectError> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(DetectError::Config(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mean_norm = features
        .iter()
        .map(|f| f.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / features.len() as f64;
    let feature_scale = if config.target_norm > 0.0 && mean_norm > 0.0 {
        config.target_norm / mean_norm
    } else {
        1.0
    };
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().map(|&v| v as f64 * feature_scale).collect())
        .collect();
    let mut heads = Vec::with_capacity(n_categories);
    for cat in 0..n_categories {
        let y: Vec<f64> = labels
            .iter()
            .map(|l| if *l == Some(cat) { 1.0 } else { -1.0 })
            .collect();
        let pos = y.iter().filter(|&&v| v > 0.0).count();
        if pos == 0 || pos == y.len() {
            log::warn!(
                "category {cat}: {pos} positives of {}; no SVM head",
                y.len()
            );
            heads.push(None);
            continue;
        }
        let (svm, trace) = train_binary_svm(&x, &y, config.c, config.max_epochs, config.tol)?;
        if !trace.converged {
            log::debug!(
                "category {cat}: svm stopped after {} epochs",
                trace.dual.len()
            );
        }
        heads.push(Some(svm));
    }
    Ok(SvmHead {
        heads,
        c: config.c,
        feature_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    /// Exact minimum of the primal over all partitions of the samples into
    /// margin violators (A), on-margin points (S) and the rest. For the
    /// optimal partition the minimizer of `0.5|v|^2 - C sum_A y_i v.z_i`
    /// subject to `y_i v.z_i = 1` on S is the optimum; evaluating the true
    /// objective at every candidate and keeping the smallest recovers it.
    fn brute_force_primal(x: &[Vec<f64>], y: &[f64], c: f64) -> f64 {
        let n = x.len();
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|r| r.iter().copied().chain([1.0]).collect())
            .collect();
        let dim = z[0].len();
        let mut best = f64::INFINITY;
        let mut part = vec![0u8; n];
        loop {
            let a: Vec<usize> = (0..n).filter(|&i| part[i] == 1).collect();
            let s: Vec<usize> = (0..n).filter(|&i| part[i] == 2).collect();
            if s.len() <= dim {
                let mut base = DVector::<f64>::zeros(dim);
                for &i in &a {
                    base += DVector::from_column_slice(&z[i]) * (c * y[i]);
                }
                // v = base + sum_S lam_j y_j z_j, with y_i v.z_i = 1 on S
                let k = s.len();
                let v = if k == 0 {
                    Some(base.clone())
                } else {
                    let gram = DMatrix::from_fn(k, k, |p, q| {
                        y[s[p]]
                            * y[s[q]]
                            * z[s[p]]
                                .iter()
                                .zip(&z[s[q]])
                                .map(|(u, w)| u * w)
                                .sum::<f64>()
                    });
                    let rhs = DVector::from_fn(k, |p, _| {
                        1.0 - y[s[p]]
                            * z[s[p]]
                                .iter()
                                .zip(base.iter())
                                .map(|(u, w)| u * w)
                                .sum::<f64>()
                    });
                    gram.lu().solve(&rhs).map(|lam| {
                        let mut v = base.clone();
                        for (j, &i) in s.iter().enumerate() {
                            v += DVector::from_column_slice(&z[i]) * (lam[j] * y[i]);
                        }
                        v
                    })
                };
                if let Some(v) = v {
                    let svm = LinearSvm {
                        w: v.as_slice()[..dim - 1].to_vec(),
                        b: v[dim - 1],
                    };
                    best = best.min(svm_primal(x, y, c, &svm));
                }
            }
            let mut i = 0;
            while i < n && part[i] == 2 {
                part[i] = 0;
                i += 1;
            }
            if i == n {
                break;
            }
            part[i] += 1;
        }
        best
    }

    fn toy() -> (Vec<Vec<f64>>, Vec<f64>) {
        let x = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.5],
            vec![0.5, 1.5],
            vec![2.0, 2.0],
            vec![2.5, 1.0],
            vec![1.2, 1.1],
            vec![0.2, 2.2],
            vec![1.8, 0.2],
        ];
        let y = vec![-1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0, -1.0];
        (x, y)
    }

    #[test]
    fn one_dimensional_sign() {
        let (svm, _) =
            train_binary_svm(&[vec![-1.0], vec![1.0]], &[-1.0, 1.0], 1.0, 1000, 1e-9).unwrap();
        assert!(svm.w[0] > 0.0);
        let (svm, _) =
            train_binary_svm(&[vec![-1.0], vec![1.0]], &[1.0, -1.0], 1.0, 1000, 1e-9).unwrap();
        assert!(svm.w[0] < 0.0);
    }

    #[test]
    fn matches_partition_oracle() {
        let (x, y) = toy();
        for c in [0.1, 1.0, 10.0] {
            let want = brute_force_primal(&x, &y, c);
            let (svm, trace) = train_binary_svm(&x, &y, c, 100_000, 1e-10).unwrap();
            let got = svm_primal(&x, &y, c, &svm);
            assert!((got - want).abs() <= 1e-3, "C={c}: {got} vs {want}");
            assert!(trace.converged);
        }
    }

    #[test]
    fn dual_never_decreases() {
        let (x, y) = toy();
        let (_, trace) = train_binary_svm(&x, &y, 5.0, 200, 0.0).unwrap();
        for w in trace.dual.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{} then {}", w[0], w[1]);
        }
        // weak duality
        for (d, p) in trace.dual.iter().zip(&trace.primal) {
            assert!(d <= &(p + 1e-9));
        }
    }

    #[test]
    fn duplicated_data_with_half_c_same_boundary() {
        let (x, y) = toy();
        let (a, _) = train_binary_svm(&x, &y, 2.0, 100_000, 1e-10).unwrap();
        let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<f64> = y.iter().chain(&y).copied().collect();
        let (b, _) = train_binary_svm(&x2, &y2, 1.0, 100_000, 1e-10).unwrap();
        for (u, v) in a.w.iter().zip(&b.w) {
            assert!((u - v).abs() < 1e-4, "{u} vs {v}");
        }
        assert!((a.b - b.b).abs() < 1e-4);
    }

    #[test]
    fn one_vs_all_heads() {
        let feats: Vec<Vec<f32>> = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.9, 0.1, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.1, 0.8, 0.0],
            vec![0.0, 0.0, 0.2],
            vec![0.1, 0.1, 0.1],
        ];
        let labels = vec![Some(0), Some(0), Some(1), Some(1), None, None];
        let head = train_svm(
            &feats,
            &labels,
            3,
            &SvmConfig {
                c: 10.0,
                ..SvmConfig::default()
            },
        )
        .unwrap();
        assert!(head.heads[2].is_none());
        let s0 = head.scores(&feats[0]);
        assert!(s0[0] > 0.0 && s0[1] < 0.0 && s0[2] == f64::NEG_INFINITY);
        let s2 = head.scores(&feats[2]);
        assert!(s2[1] > 0.0 && s2[0] < 0.0);
        assert!(head.scores(&feats[4])[..2].iter().all(|&v| v < 0.0));
    }

    #[test]
    fn zero_weights_score_bias() {
        let head = SvmHead {
            heads: vec![Some(LinearSvm {
                w: vec![0.0; 3],
                b: -0.7,
            })],
            c: 1.0,
            feature_scale: 3.0,
        };
        assert_eq!(head.scores(&[5.0, 1.0, 2.0]), vec![-0.7]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn oracle_on_random_sets(
            pts in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, any::<bool>()), 4..7),
            c in 0.2f64..5.0,
        ) {
            let x: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0, p.1]).collect();
            let mut y: Vec<f64> = pts.iter().map(|p| if p.2 { 1.0 } else { -1.0 }).collect();
            y[0] = 1.0;
            y[1] = -1.0;
            let want = brute_force_primal(&x, &y, c);
            let (svm, _) = train_binary_svm(&x, &y, c, 200_000, 1e-10).unwrap();
            let got = svm_primal(&x, &y, c, &svm);
            prop_assert!((got - want).abs() <= 1e-3 * want.max(1.0), "{} vs {}", got, want);
        }
    }
}
