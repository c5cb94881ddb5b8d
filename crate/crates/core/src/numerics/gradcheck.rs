use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamSet, Var};

const REL_FLOOR: f64 = 1e-8;

fn rel_error(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR)
}

/// One checked parameter entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Every checked entry plus the one with the largest relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
    /// Loss at the unperturbed point.
    pub loss: f64,
    pub entries: Vec<GradEntry>,
}

impl GradCheckReport {
    /// Maximum relative error over entries with `max(|analytic|, |fd|) ≥ min_magnitude`,
    /// and the number of entries that qualified.
    pub fn max_rel_error_above(&self, min_magnitude: f64) -> (f64, usize) {
        self.entries
            .iter()
            .filter(|e| e.analytic.abs().max(e.numeric.abs()) >= min_magnitude)
            .fold((0.0, 0), |(m, n), e| (m.max(rel_error(e.analytic, e.numeric)), n + 1))
    }
}

/// Compares tape gradients with central finite differences.
///
/// `loss_fn` must rebuild the same deterministic computation on every call.
/// Only trainable parameters are perturbed. Returns the maximum over all
/// checked entries of `|analytic − fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check<F>(params: &mut ParamSet, fd_step: f64, loss_fn: F) -> Result<f64>
where
    F: FnMut(&ParamSet, &mut Graph) -> Result<Var>,
{
    grad_check_report(params, fd_step, loss_fn).map(|r| r.max_rel_error)
}

/// Like [`grad_check`], also locating the worst entry.
pub fn grad_check_report<F>(params: &mut ParamSet, fd_step: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet, &mut Graph) -> Result<Var>,
{
    let mut graph = Graph::new();
    let loss = loss_fn(params, &mut graph)?;
    let base = graph.value(loss).item();
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed point".into()));
    }
    graph.backward(loss, params)?;
    drop(graph);

    let mut eval = |params: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(params, &mut g)?;
        let v = g.value(l).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("loss at a perturbed point".into()))
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
        loss: base,
        entries: Vec::new(),
    };
    for idx in 0..params.len() {
        if !params.by_index(idx).trainable {
            continue;
        }
        let analytic = params.by_index(idx).grad.clone();
        for e in 0..analytic.len() {
            let orig = params.by_index(idx).value.data()[e];
            params.by_index_mut(idx).value.data_mut()[e] = orig + fd_step;
            let plus = eval(params);
            params.by_index_mut(idx).value.data_mut()[e] = orig - fd_step;
            let minus = eval(params);
            params.by_index_mut(idx).value.data_mut()[e] = orig;
            let fd = (plus? - minus?) / (2.0 * fd_step);
            let a = analytic.data()[e];
            let rel = rel_error(a, fd);
            report.entries_checked += 1;
            report.entries.push(GradEntry { param: idx, index: e, analytic: a, numeric: fd });
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = params.by_index(idx).name.clone();
                report.worst_index = e;
                report.analytic = a;
                report.numeric = fd;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{AttentionShape, BatchNormState, Mode, Tensor};

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        ps.insert("w", random(&[3, 4], &mut rng)).unwrap();
        let c = random(&[3, 4], &mut rng);
        let err = grad_check(&mut ps, 1e-5, |p, g| {
            let w = g.param(p, "w")?;
            let c = g.input(c.clone());
            let m = g.mul(w, c)?;
            Ok(g.sum(m))
        })
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn quadratic_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        ps.insert("w", random(&[5], &mut rng)).unwrap();
        let err = grad_check(&mut ps, 1e-5, |p, g| {
            let w = g.param(p, "w")?;
            let sq = g.mul(w, w)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::full(&[1], f64::MAX)).unwrap();
        let res = grad_check(&mut ps, 1e-5, |p, g| {
            let w = g.param(p, "w")?;
            let s = g.scale(w, 10.0);
            Ok(g.sum(s))
        });
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    /// Every primitive, chained so each one's gradient is exercised.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, t, d, heads, vocab) = (2, 3, 4, 2, 7);
        let mut ps = ParamSet::new();
        ps.insert("emb", random(&[vocab, d], &mut rng)).unwrap();
        ps.insert("wq", random(&[d, d], &mut rng)).unwrap();
        ps.insert("wk", random(&[d, d], &mut rng)).unwrap();
        ps.insert("wv", random(&[d, d], &mut rng)).unwrap();
        ps.insert("ln_g", random(&[d], &mut rng)).unwrap();
        ps.insert("ln_b", random(&[d], &mut rng)).unwrap();
        ps.insert("bn_g", random(&[d], &mut rng)).unwrap();
        ps.insert("bn_b", random(&[d], &mut rng)).unwrap();
        ps.insert("w_out", random(&[d, vocab], &mut rng)).unwrap();
        ps.insert("bias", random(&[vocab], &mut rng)).unwrap();
        let ids = [1, 4, 6, 0, 2, 2];
        let valid = [true, true, false, true, true, true];
        let targets = [3, 0, 5, 6, 1, 2];
        let err = grad_check(&mut ps, 1e-5, |p, g| {
            let emb = g.param(p, "emb")?;
            let x = g.gather(emb, &ids)?;
            let (g1, b1) = (g.param(p, "ln_g")?, g.param(p, "ln_b")?);
            let h = g.layer_norm(x, g1, b1, 1e-5)?;
            let (wq, wk, wv) = (g.param(p, "wq")?, g.param(p, "wk")?, g.param(p, "wv")?);
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let a = g.attention(q, k, v, AttentionShape { batch: b, seq: t, heads }, &valid)?;
            let a = g.add(a, x)?;
            let mut st = BatchNormState::new(d);
            let (g2, b2) = (g.param(p, "bn_g")?, g.param(p, "bn_b")?);
            let n = g.batch_norm(a, g2, b2, &mut st, Mode::Train)?;
            let r = g.relu(n);
            let s = g.sigmoid(a);
            let rs = g.mul(r, s)?;
            let w = g.param(p, "w_out")?;
            let logits = g.matmul(rs, w)?;
            let bias = g.param(p, "bias")?;
            let logits = g.add_row(logits, bias)?;
            let sm = g.softmax_rows(logits);
            let ce = g.cross_entropy(logits, &targets)?;
            let extra = g.sum(sm);
            let extra = g.scale(extra, 0.1);
            g.add(ce, extra)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn eval_batch_norm_and_bce_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        ps.insert("x", random(&[4, 3], &mut rng)).unwrap();
        ps.insert("g", random(&[3], &mut rng)).unwrap();
        ps.insert("b", random(&[3], &mut rng)).unwrap();
        ps.insert("w", random(&[3, 1], &mut rng)).unwrap();
        let mut st = BatchNormState::new(3);
        st.running_mean = vec![0.1, -0.2, 0.3];
        st.running_var = vec![0.5, 1.5, 2.0];
        let err = grad_check(&mut ps, 1e-5, |p, g| {
            let mut st = st.clone();
            let x = g.param(p, "x")?;
            let (gg, bb) = (g.param(p, "g")?, g.param(p, "b")?);
            let y = g.batch_norm(x, gg, bb, &mut st, Mode::Eval)?;
            let w = g.param(p, "w")?;
            let z = g.matmul(y, w)?;
            g.bce_with_logits(z, &[0.0, 1.0, 1.0, 0.0])
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
