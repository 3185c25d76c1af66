//! Global matching: turn feature matrices into scene flow.
//!
//! The cross-similarity matrix softmax-normalizes the scaled feature
//! correlation between the source and target clouds; the flow is the
//! similarity-weighted average of target coordinates minus the source
//! coordinates. A second, learned self-similarity matrix over the source
//! cloud then smooths the flow field, which is what carries motion into
//! occluded regions.

use crate::error::{Error, Result};
use crate::matrix::Scalar;
use crate::tape::{Graph, VarId};
use crate::tokenizer::LinearVars;

/// Learnable projections of the self-similarity branch.
#[derive(Debug, Clone, Copy)]
pub struct MatcherVars {
    pub query: LinearVars,
    pub key: LinearVars,
}

/// Row-stochastic matching confidence from every source point to all target
/// points: `softmax_rows(F1 F2^T / sqrt(d))`.
pub fn cross_similarity<S: Scalar>(g: &mut Graph<S>, f1: VarId, f2: VarId) -> Result<VarId> {
    let d = g.value(f1).cols();
    if g.value(f2).cols() != d {
        return Err(Error::invalid_argument(format!(
            "cross_similarity width mismatch: {d} vs {}",
            g.value(f2).cols()
        )));
    }
    let logits = g.matmul_nt(f1, f2);
    let scaled = g.scale(logits, 1.0 / (d as f64).sqrt());
    Ok(g.softmax_rows(scaled))
}

/// Row-stochastic source-to-source similarity:
/// `softmax_rows(Wq(F1) Wk(F1)^T / sqrt(d))`.
pub fn self_similarity<S: Scalar>(g: &mut Graph<S>, f1: VarId, vars: &MatcherVars) -> Result<VarId> {
    let d = g.value(f1).cols();
    if g.value(vars.query.w).cols() != d || g.value(vars.key.w).cols() != d {
        return Err(Error::invalid_argument(format!(
            "self_similarity width mismatch: features {d}, projections {} / {}",
            g.value(vars.query.w).cols(),
            g.value(vars.key.w).cols()
        )));
    }
    let q = g.linear(f1, vars.query.w, vars.query.b);
    let k = g.linear(f1, vars.key.w, vars.key.b);
    let logits = g.matmul_nt(q, k);
    let scaled = g.scale(logits, 1.0 / (d as f64).sqrt());
    Ok(g.softmax_rows(scaled))
}

/// Flow from matching: `m_cross * P2 - P1`. Each output endpoint is a convex
/// combination of target coordinates.
pub fn match_flow<S: Scalar>(g: &mut Graph<S>, m_cross: VarId, p1: VarId, p2: VarId) -> Result<VarId> {
    let (n1, n2) = g.value(m_cross).shape();
    if g.value(p1).shape() != (n1, 3) || g.value(p2).shape() != (n2, 3) {
        return Err(Error::invalid_argument(format!(
            "match_flow dimension mismatch: m_cross {n1}x{n2}, p1 {:?}, p2 {:?}",
            g.value(p1).shape(),
            g.value(p2).shape()
        )));
    }
    let matched = g.matmul(m_cross, p2);
    Ok(g.sub(matched, p1))
}

/// Smoothed final flow: `m_self * v_inter`. Row-stochastic smoothing leaves
/// constant fields fixed.
pub fn smooth_flow<S: Scalar>(g: &mut Graph<S>, m_self: VarId, v_inter: VarId) -> Result<VarId> {
    let (n1, n1b) = g.value(m_self).shape();
    if n1 != n1b || g.value(v_inter).shape() != (n1, 3) {
        return Err(Error::invalid_argument(format!(
            "smooth_flow dimension mismatch: m_self {n1}x{n1b}, v_inter {:?}",
            g.value(v_inter).shape()
        )));
    }
    Ok(g.matmul(m_self, v_inter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::rng::Rng;

    fn randn(rng: &mut Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.normal() * 0.5)
    }

    #[test]
    fn cross_similarity_hand_softmax() {
        // F1 = F2 = I (2x2): logits = I / sqrt(2); row 0 = softmax(0.7071, 0).
        let mut g: Graph<f64> = Graph::new();
        let f1 = g.var(Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let f2 = g.var(Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = cross_similarity(&mut g, f1, f2).unwrap();
        let z = std::f64::consts::FRAC_1_SQRT_2;
        let e = z.exp();
        let p = e / (e + 1.0);
        assert!((g.value(m).get(0, 0) - p).abs() < 1e-12);
        assert!((g.value(m).get(0, 1) - (1.0 - p)).abs() < 1e-12);
        // Matches the documented approximation.
        assert!((g.value(m).get(0, 0) - 0.6698).abs() < 5e-4);
        assert!((g.value(m).get(0, 1) - 0.3302).abs() < 5e-4);
    }

    #[test]
    fn cross_similarity_zero_features_uniform() {
        let mut g: Graph<f64> = Graph::new();
        let f1 = g.var(Matrix::zeros(3, 4));
        let f2 = g.var(randn(&mut Rng::new(1), 5, 4));
        let m = cross_similarity(&mut g, f1, f2).unwrap();
        for r in 0..3 {
            for c in 0..5 {
                assert!((g.value(m).get(r, c) - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_similarity_saturates_to_one_hot() {
        // Orthogonal rows scaled up: each row matches exactly one target row.
        let scale = 50.0;
        let mut g: Graph<f64> = Graph::new();
        let eye = Matrix::from_fn(3, 3, |r, c| if r == c { scale } else { 0.0 });
        let f1 = g.var(eye.clone());
        let f2 = g.var(eye);
        let m = cross_similarity(&mut g, f1, f2).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!((g.value(m).get(r, c) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn self_similarity_zero_query_uniform() {
        let mut rng = Rng::new(2);
        let mut g: Graph<f64> = Graph::new();
        let f1 = g.var(randn(&mut rng, 3, 4));
        let vars = MatcherVars {
            query: LinearVars {
                w: g.var(Matrix::zeros(4, 4)),
                b: g.var(Matrix::zeros(1, 4)),
            },
            key: LinearVars {
                w: g.var(randn(&mut rng, 4, 4)),
                b: g.var(randn(&mut rng, 1, 4)),
            },
        };
        let m = self_similarity(&mut g, f1, &vars).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((g.value(m).get(r, c) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_similarity_identity_projection_saturates() {
        let scale = 40.0;
        let mut g: Graph<f64> = Graph::new();
        let feats = Matrix::from_fn(3, 3, |r, c| if r == c { scale } else { 0.0 });
        let f1 = g.var(feats);
        let eye = |g: &mut Graph<f64>| LinearVars {
            w: g.var(Matrix::from_fn(3, 3, |r, c| if r == c { 1.0 } else { 0.0 })),
            b: g.var(Matrix::zeros(1, 3)),
        };
        let vars = MatcherVars {
            query: eye(&mut g),
            key: eye(&mut g),
        };
        let m = self_similarity(&mut g, f1, &vars).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!((g.value(m).get(r, c) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn self_similarity_matches_loop_oracle() {
        let mut rng = Rng::new(3);
        let feats = randn(&mut rng, 3, 4);
        let wq = randn(&mut rng, 4, 4);
        let bq = randn(&mut rng, 1, 4);
        let wk = randn(&mut rng, 4, 4);
        let bk = randn(&mut rng, 1, 4);
        let mut g: Graph<f64> = Graph::new();
        let f1 = g.var(feats.clone());
        let vars = MatcherVars {
            query: LinearVars {
                w: g.var(wq.clone()),
                b: g.var(bq.clone()),
            },
            key: LinearVars {
                w: g.var(wk.clone()),
                b: g.var(bk.clone()),
            },
        };
        let m = self_similarity(&mut g, f1, &vars).unwrap();

        let proj = |w: &Matrix<f64>, b: &Matrix<f64>, x: &Matrix<f64>| {
            Matrix::from_fn(x.rows(), w.rows(), |r, o| {
                let mut acc = b.get(0, o);
                for c in 0..x.cols() {
                    acc += x.get(r, c) * w.get(o, c);
                }
                acc
            })
        };
        let q = proj(&wq, &bq, &feats);
        let k = proj(&wk, &bk, &feats);
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / 2.0)
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for j in 0..3 {
                let expect = (logits[j] - mx).exp() / z;
                assert!((g.value(m).get(i, j) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn match_flow_identity_match_zero_flow() {
        let mut g: Graph<f64> = Graph::new();
        let p = Matrix::from_rows(&[&[1.0, 0.0, 2.0], &[0.0, 1.0, -1.0]]);
        let p1 = g.constant(p.clone());
        let p2 = g.constant(p);
        let m = g.var(Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let flow = match_flow(&mut g, m, p1, p2).unwrap();
        assert!(g.value(flow).max_abs_diff(&Matrix::zeros(2, 3)) < 1e-12);
    }

    #[test]
    fn match_flow_uniform_gives_centroid_offset() {
        let mut g: Graph<f64> = Graph::new();
        let p1m = Matrix::from_rows(&[&[0.5, 0.5, 0.5], &[1.0, 1.0, 1.0]]);
        let p2m = Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let p1 = g.constant(p1m.clone());
        let p2 = g.constant(p2m.clone());
        let m = g.var(Matrix::from_fn(2, 3, |_, _| 1.0 / 3.0));
        let flow = match_flow(&mut g, m, p1, p2).unwrap();
        let centroid = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        for r in 0..2 {
            for c in 0..3 {
                let expect = centroid[c] - p1m.get(r, c);
                assert!((g.value(flow).get(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn match_flow_hand_product() {
        let mut g: Graph<f64> = Graph::new();
        let m = g.var(Matrix::from_rows(&[&[0.7, 0.3], &[0.2, 0.8]]));
        let p1 = g.constant(Matrix::zeros(2, 3));
        let p2 = g.constant(Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]));
        let flow = match_flow(&mut g, m, p1, p2).unwrap();
        let expect = Matrix::from_rows(&[&[0.7, 0.3, 0.0], &[0.2, 0.8, 0.0]]);
        assert!(g.value(flow).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn smooth_flow_identity_and_average() {
        let mut g: Graph<f64> = Graph::new();
        let v = Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
        let vin = g.var(v.clone());
        let eye = g.var(Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let out = smooth_flow(&mut g, eye, vin).unwrap();
        assert!(g.value(out).max_abs_diff(&v) < 1e-12);

        let avg = g.var(Matrix::from_fn(2, 2, |_, _| 0.5));
        let out2 = smooth_flow(&mut g, avg, vin).unwrap();
        let expect = Matrix::from_rows(&[&[0.5, 0.0, 0.0], &[0.5, 0.0, 0.0]]);
        assert!(g.value(out2).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn smooth_flow_fixes_constant_fields() {
        // Any row-stochastic matrix maps a constant field to itself.
        let mut rng = Rng::new(9);
        for _ in 0..10 {
            let n = 2 + rng.below(6);
            let mut g: Graph<f64> = Graph::new();
            let logits = g.var(randn(&mut rng, n, n));
            let m = g.softmax_rows(logits);
            let c = [rng.normal(), rng.normal(), rng.normal()];
            let field = g.constant(Matrix::from_fn(n, 3, |_, col| c[col]));
            let out = smooth_flow(&mut g, m, field).unwrap();
            assert!(g.value(out).max_abs_diff(g.value(field)) < 1e-6);
        }
    }

    #[test]
    fn target_permutation_with_matched_columns_is_invariant() {
        let mut rng = Rng::new(10);
        let n1 = 4;
        let n2 = 5;
        let m_raw = randn(&mut rng, n1, n2);
        let p2m = randn(&mut rng, n2, 3);
        let p1m = randn(&mut rng, n1, 3);
        let perm = Rng::new(11).permutation(n2);

        let run = |m_in: &Matrix<f64>, p2_in: &Matrix<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let logits = g.var(m_in.clone());
            let m = g.softmax_rows(logits);
            let p1 = g.constant(p1m.clone());
            let p2 = g.constant(p2_in.clone());
            let flow = match_flow(&mut g, m, p1, p2).unwrap();
            g.value(flow).clone()
        };
        let base = run(&m_raw, &p2m);
        let m_perm = Matrix::from_fn(n1, n2, |r, c| m_raw.get(r, perm[c]));
        let p2_perm = p2m.select_rows(&perm);
        let permuted = run(&m_perm, &p2_perm);
        assert!(base.max_abs_diff(&permuted) < 1e-12);
    }

    #[test]
    fn dimension_mismatches_are_invalid_argument() {
        let mut rng = Rng::new(12);
        let mut g: Graph<f64> = Graph::new();
        let f1 = g.var(randn(&mut rng, 3, 4));
        let f2 = g.var(randn(&mut rng, 3, 5));
        assert!(matches!(
            cross_similarity(&mut g, f1, f2),
            Err(Error::InvalidArgument(_))
        ));
        let m = g.var(randn(&mut rng, 3, 3));
        let p1 = g.constant(randn(&mut rng, 3, 3));
        let p2 = g.constant(randn(&mut rng, 4, 3));
        assert!(matches!(
            match_flow(&mut g, m, p1, p2),
            Err(Error::InvalidArgument(_))
        ));
        let v = g.constant(randn(&mut rng, 4, 3));
        assert!(matches!(
            smooth_flow(&mut g, m, v),
            Err(Error::InvalidArgument(_))
        ));
    }
}
