//! Forward pass and training objective.

use crate::align::{infonce, mmd_squared};
use crate::autograd::{Tape, Var};
use crate::dream::{dream_forward, DreamConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::graph::{propagate, Graph};
use super::{HyperParams, ModelParams, ModelVars, Variant};

/// Items encoded per tape when no gradients are needed.
const FROZEN_CHUNK: usize = 128;

/// A training triple: `user` interacted with `pos` but not with `neg`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Per-item visual and textual feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemFeatures {
    /// `(N, D_V)`.
    pub visual: Tensor,
    /// `(N, D_T)`.
    pub text: Tensor,
}

impl ItemFeatures {
    pub fn new(visual: Tensor, text: Tensor) -> Result<Self> {
        if visual.rank() != 2 || text.rank() != 2 {
            return Err(Error::dim(format!(
                "feature matrices must be 2-D, got {:?} and {:?}",
                visual.shape(),
                text.shape()
            )));
        }
        if visual.rows() != text.rows() {
            return Err(Error::dim(format!(
                "visual features have {} rows but text features have {}",
                visual.rows(),
                text.rows()
            )));
        }
        Ok(ItemFeatures { visual, text })
    }

    pub fn items(&self) -> usize {
        self.visual.rows()
    }

    pub fn d_visual(&self) -> usize {
        self.visual.cols()
    }

    pub fn d_text(&self) -> usize {
        self.text.cols()
    }
}

/// `(X_v·W_V, X_t·W_T)`.
pub fn reduce_modalities(tape: &mut Tape, xv: Var, xt: Var, w_v: Var, w_t: Var) -> Result<(Var, Var)> {
    Ok((tape.linear(xv, w_v, None)?, tape.linear(xt, w_t, None)?))
}

/// Encoded modality rows; a modality the variant drops is `None`.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub h_v: Option<Var>,
    pub h_t: Option<Var>,
}

/// Projects and refines the feature rows `rows` of each modality the
/// variant uses. With refinement bypassed the encodings are the projected
/// rows themselves.
pub fn encode_items(
    tape: &mut Tape,
    features: &ItemFeatures,
    rows: &[usize],
    vars: &ModelVars,
    dream: &DreamConfig,
    variant: Variant,
) -> Result<Encoded> {
    let mut one = |x: &Tensor, w: Var, p: &crate::dream::DreamVars| -> Result<Var> {
        let x = tape.constant(x.gather_rows(rows)?);
        let reduced = tape.linear(x, w, None)?;
        if variant.uses_refinement() {
            dream_forward(tape, reduced, p, dream)
        } else {
            Ok(reduced)
        }
    };
    let h_v = match variant.uses_visual() {
        true => Some(one(&features.visual, vars.w_v, &vars.dream_v)?),
        false => None,
    };
    let h_t = match variant.uses_text() {
        true => Some(one(&features.text, vars.w_t, &vars.dream_t)?),
        false => None,
    };
    Ok(Encoded { h_v, h_t })
}

/// Encodes every item with frozen parameters, in chunks.
pub fn encode_items_frozen(
    params: &ModelParams,
    features: &ItemFeatures,
    dilations: &[usize],
    variant: Variant,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    check_features(params, features)?;
    let dream = params.dream_config(dilations);
    let n = features.items();
    let d = params.d();
    let mut hv = variant.uses_visual().then(|| Vec::with_capacity(n * d));
    let mut ht = variant.uses_text().then(|| Vec::with_capacity(n * d));
    let mut start = 0;
    while start < n {
        let rows: Vec<usize> = (start..(start + FROZEN_CHUNK).min(n)).collect();
        let mut tape = Tape::new();
        let vars = params.register_frozen(&mut tape);
        let enc = encode_items(&mut tape, features, &rows, &vars, &dream, variant)?;
        if let (Some(buf), Some(h)) = (hv.as_mut(), enc.h_v) {
            buf.extend_from_slice(tape.value(h));
        }
        if let (Some(buf), Some(h)) = (ht.as_mut(), enc.h_t) {
            buf.extend_from_slice(tape.value(h));
        }
        start += FROZEN_CHUNK;
    }
    let wrap = |b: Option<Vec<f64>>| b.map(|v| Tensor::new(&[n, d], v)).transpose();
    Ok((wrap(hv)?, wrap(ht)?))
}

/// `Q* + ½(H_v·G_v + H_t·G_t)`; with one modality its term enters with
/// weight 1, with none `Q*` is returned unchanged.
pub fn fuse(tape: &mut Tape, q: Var, enc: &Encoded, g_v: Var, g_t: Var) -> Result<Var> {
    let mut terms = Vec::new();
    if let Some(h) = enc.h_v {
        terms.push(tape.linear(h, g_v, None)?);
    }
    if let Some(h) = enc.h_t {
        terms.push(tape.linear(h, g_t, None)?);
    }
    match terms.as_slice() {
        [] => Ok(q),
        [one] => tape.add(q, *one),
        [a, b] => {
            let s = tape.add(*a, *b)?;
            let half = tape.scale(s, 0.5)?;
            tape.add(q, half)
        }
        _ => unreachable!(),
    }
}

/// Inner product of user row `u` of `e_u` and item row `i` of `e_i`.
pub fn score(e_u: &Tensor, e_i: &Tensor, u: usize, i: usize) -> Result<f64> {
    if u >= e_u.rows() || i >= e_i.rows() {
        return Err(Error::Index(format!(
            "score({u}, {i}) outside {} users x {} items",
            e_u.rows(),
            e_i.rows()
        )));
    }
    if e_u.cols() != e_i.cols() {
        return Err(Error::dim(format!(
            "embedding widths {} and {} differ",
            e_u.cols(),
            e_i.cols()
        )));
    }
    Ok(e_u.row(u).iter().zip(e_i.row(i)).map(|(a, b)| a * b).sum())
}

/// `Σ softplus(ŷ_uj − ŷ_ui)` over the triples, i.e. `Σ −ln σ(ŷ_ui − ŷ_uj)`.
/// Triple indices address rows of `e_u` and `e_i`.
pub fn bpr_loss(tape: &mut Tape, e_u: Var, e_i: Var, triples: &[Triple]) -> Result<Var> {
    if triples.is_empty() {
        return Err(Error::Usage("ranking loss needs a non-empty batch".into()));
    }
    let users: Vec<usize> = triples.iter().map(|t| t.user).collect();
    let pos: Vec<usize> = triples.iter().map(|t| t.pos).collect();
    let neg: Vec<usize> = triples.iter().map(|t| t.neg).collect();
    let eu = tape.gather_rows(e_u, &users)?;
    let ep = tape.gather_rows(e_i, &pos)?;
    let en = tape.gather_rows(e_i, &neg)?;
    let yp = tape.row_dot(eu, ep)?;
    let yn = tape.row_dot(eu, en)?;
    let margin = tape.sub(yn, yp)?;
    let l = tape.softplus(margin)?;
    tape.sum(l)
}

/// `‖Θ‖²` over the weights the variant trains; the spatial-attention
/// biases are excluded.
pub fn regularizer(tape: &mut Tape, vars: &ModelVars, variant: Variant) -> Result<Var> {
    let mut weights = vec![vars.user_emb, vars.item_emb];
    let modalities = [
        (variant.uses_visual(), vars.w_v, vars.g_v, &vars.dream_v),
        (variant.uses_text(), vars.w_t, vars.g_t, &vars.dream_t),
    ];
    for (used, w, g, dream) in modalities {
        if !used {
            continue;
        }
        weights.extend([w, g]);
        if variant.uses_refinement() {
            weights.extend([dream.k1, dream.k_gap, dream.w1, dream.w2, dream.k_sp, dream.k_out]);
            weights.extend(dream.k_dilated.iter().copied());
        }
    }
    let mut acc: Option<Var> = None;
    for w in weights {
        let s = tape.sum_squares(w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("identity embeddings are always present"))
}

/// Loss terms recorded on the tape. Alignment terms are `None` when their
/// weight is zero or the variant has no alignment.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub bpr: Var,
    pub mmd: Option<Var>,
    pub infonce: Option<Var>,
    /// `λ_reg·‖Θ‖²`.
    pub reg: Var,
}

/// `L_BPR + λ_cl·L_cl + λ_mmd·L_mmd + λ_reg·‖Θ‖²` for one batch.
///
/// Only the items named by the batch are encoded. The alignment losses use
/// the encodings of the distinct positive items.
pub fn total_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    batch: &[Triple],
    features: &ItemFeatures,
    graph: &Graph,
    hp: &HyperParams,
    variant: Variant,
) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::Usage("training batch is empty".into()));
    }
    let d = tape.shape(vars.w_v)[1];
    let dream = hp.dream_config(d);
    let (p_star, q_star) = propagate(tape, vars.user_emb, vars.item_emb, graph, hp.graph_layers)?;

    let mut items: Vec<usize> = batch.iter().flat_map(|t| [t.pos, t.neg]).collect();
    items.sort_unstable();
    items.dedup();
    let local = |i: usize| items.binary_search(&i).expect("item collected above");

    let enc = encode_items(tape, features, &items, vars, &dream, variant)?;
    let q_rows = tape.gather_rows(q_star, &items)?;
    let e_i = fuse(tape, q_rows, &enc, vars.g_v, vars.g_t)?;
    let local_batch: Vec<Triple> = batch
        .iter()
        .map(|t| Triple {
            user: t.user,
            pos: local(t.pos),
            neg: local(t.neg),
        })
        .collect();
    let bpr = bpr_loss(tape, p_star, e_i, &local_batch)?;

    let (mut mmd, mut nce) = (None, None);
    let cfg = &hp.align;
    if variant.uses_alignment() && (cfg.lambda_mmd > 0.0 || cfg.lambda_cl > 0.0) {
        let (Some(h_v), Some(h_t)) = (enc.h_v, enc.h_t) else {
            unreachable!("alignment variants use both modalities")
        };
        let mut pos: Vec<usize> = local_batch.iter().map(|t| t.pos).collect();
        pos.sort_unstable();
        pos.dedup();
        let v = tape.gather_rows(h_v, &pos)?;
        let t = tape.gather_rows(h_t, &pos)?;
        if cfg.lambda_mmd > 0.0 {
            mmd = Some(mmd_squared(tape, v, t, cfg)?);
        }
        if cfg.lambda_cl > 0.0 {
            nce = Some(infonce(tape, v, t, cfg.tau, cfg.symmetric)?);
        }
    }

    let reg_raw = regularizer(tape, vars, variant)?;
    let reg = tape.scale(reg_raw, hp.lambda_reg)?;
    let mut total = bpr;
    if let Some(l) = nce {
        let w = tape.scale(l, cfg.lambda_cl)?;
        total = tape.add(total, w)?;
    }
    if let Some(l) = mmd {
        let w = tape.scale(l, cfg.lambda_mmd)?;
        total = tape.add(total, w)?;
    }
    total = tape.add(total, reg)?;
    Ok(LossTerms {
        total,
        bpr,
        mmd,
        infonce: nce,
        reg,
    })
}

fn check_features(params: &ModelParams, features: &ItemFeatures) -> Result<()> {
    if features.items() != params.items()
        || features.d_visual() != params.d_visual()
        || features.d_text() != params.d_text()
    {
        return Err(Error::dim(format!(
            "model expects {} items with {}/{} visual/text columns, features have {} items with {}/{}",
            params.items(),
            params.d_visual(),
            params.d_text(),
            features.items(),
            features.d_visual(),
            features.d_text()
        )));
    }
    Ok(())
}

/// Final user and item representations `(E_u, E_i)` with frozen parameters.
pub fn embeddings(
    params: &ModelParams,
    features: &ItemFeatures,
    graph: &Graph,
    hp: &HyperParams,
    variant: Variant,
) -> Result<(Tensor, Tensor)> {
    let (h_v, h_t) = encode_items_frozen(params, features, &hp.dilations, variant)?;
    let mut tape = Tape::new();
    let p = tape.constant(params.user_emb.clone());
    let q = tape.constant(params.item_emb.clone());
    let (p_star, q_star) = propagate(&mut tape, p, q, graph, hp.graph_layers)?;
    let enc = Encoded {
        h_v: h_v.map(|h| tape.constant(h)),
        h_t: h_t.map(|h| tape.constant(h)),
    };
    let g_v = tape.constant(params.g_v.clone());
    let g_t = tape.constant(params.g_t.clone());
    let e_i = fuse(&mut tape, q_star, &enc, g_v, g_t)?;
    Ok((tape.tensor(p_star), tape.tensor(e_i)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        params: ModelParams,
        features: ItemFeatures,
        graph: Graph,
        hp: HyperParams,
        batch: Vec<Triple>,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hp = HyperParams {
            d_id: 8,
            branch_channels: 4,
            ..HyperParams::default()
        };
        let (m, n) = (5, 8);
        let features = ItemFeatures::new(
            Tensor::random_uniform(&[n, 24], &mut rng).unwrap(),
            Tensor::random_uniform(&[n, 16], &mut rng).unwrap(),
        )
        .unwrap();
        let params = ModelParams::init(m, n, 24, 16, &hp, &mut rng).unwrap();
        let pairs: Vec<(usize, usize)> = (0..m).flat_map(|u| [(u, u), (u, (u + 3) % n)]).collect();
        let graph = Graph::from_pairs(m, n, &pairs).unwrap();
        let batch = (0..m)
            .map(|u| Triple {
                user: u,
                pos: u,
                neg: (u + 5) % n,
            })
            .collect();
        Fixture {
            params,
            features,
            graph,
            hp,
            batch,
        }
    }

    fn loss_values(f: &Fixture, hp: &HyperParams, variant: Variant) -> (f64, f64, Option<f64>, Option<f64>, f64) {
        let mut tape = Tape::new();
        let vars = f.params.register(&mut tape);
        let l = total_loss(&mut tape, &vars, &f.batch, &f.features, &f.graph, hp, variant).unwrap();
        let get = |v: Var| tape.scalar(v).unwrap();
        (get(l.total), get(l.bpr), l.mmd.map(get), l.infonce.map(get), get(l.reg))
    }

    #[test]
    fn bpr_spot_values() {
        let mut tape = Tape::new();
        let eu = tape.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let ei = tape.constant(Tensor::new(&[3, 2], vec![0.5, 1.0, 0.5, -3.0, -0.5, 2.0]).unwrap());
        let tie = bpr_loss(
            &mut tape,
            eu,
            ei,
            &[Triple {
                user: 0,
                pos: 0,
                neg: 1,
            }],
        )
        .unwrap();
        assert!((tape.scalar(tie).unwrap() - 2f64.ln()).abs() < 1e-12);
        let unit = bpr_loss(
            &mut tape,
            eu,
            ei,
            &[Triple {
                user: 0,
                pos: 0,
                neg: 2,
            }],
        )
        .unwrap();
        let want = -(1.0 / (1.0 + (-1f64).exp())).ln();
        assert!((tape.scalar(unit).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.313262).abs() < 1e-6);
        assert!(matches!(bpr_loss(&mut tape, eu, ei, &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn bpr_decreases_with_margin() {
        let mut prev = f64::INFINITY;
        for k in 0..10 {
            let mut tape = Tape::new();
            let eu = tape.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
            let ei = tape.constant(Tensor::new(&[2, 1], vec![k as f64 * 0.5, 0.0]).unwrap());
            let l = bpr_loss(
                &mut tape,
                eu,
                ei,
                &[Triple {
                    user: 0,
                    pos: 0,
                    neg: 1,
                }],
            )
            .unwrap();
            let v = tape.scalar(l).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn score_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eu = Tensor::random_uniform(&[3, 5], &mut rng).unwrap();
        let ei = Tensor::random_uniform(&[4, 5], &mut rng).unwrap();
        let mut want = 0.0;
        for k in 0..5 {
            want += eu.at(&[2, k]) * ei.at(&[1, k]);
        }
        assert!((score(&eu, &ei, 2, 1).unwrap() - want).abs() < 1e-12);
        assert!(matches!(score(&eu, &ei, 3, 0), Err(Error::Index(_))));
        let unit = Tensor::new(&[1, 2], vec![0.6, 0.8]).unwrap();
        assert!((score(&unit, &unit, 0, 0).unwrap() - 1.0).abs() < 1e-15);
        let ortho = Tensor::new(&[1, 2], vec![-0.8, 0.6]).unwrap();
        assert_eq!(score(&unit, &ortho, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn fusion_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::random_uniform(&[4, 3], &mut rng).unwrap());
        let hv = tape.constant(Tensor::random_uniform(&[4, 2], &mut rng).unwrap());
        let ht = tape.constant(Tensor::random_uniform(&[4, 2], &mut rng).unwrap());
        let gv = tape.constant(Tensor::random_uniform(&[2, 3], &mut rng).unwrap());
        let gt = tape.constant(Tensor::random_uniform(&[2, 3], &mut rng).unwrap());
        let zero = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let both = Encoded {
            h_v: Some(hv),
            h_t: Some(ht),
        };
        let e = fuse(&mut tape, q, &both, zero, zero).unwrap();
        assert_eq!(tape.value(e), tape.value(q));

        let full = fuse(&mut tape, q, &both, gv, gt).unwrap();
        let text = fuse(
            &mut tape,
            q,
            &Encoded {
                h_v: None,
                h_t: Some(ht),
            },
            gv,
            gt,
        )
        .unwrap();
        let vis = fuse(
            &mut tape,
            q,
            &Encoded {
                h_v: Some(hv),
                h_t: None,
            },
            gv,
            gt,
        )
        .unwrap();
        let ht_gt = tape.linear(ht, gt, None).unwrap();
        for k in 0..12 {
            let qk = tape.value(q)[k];
            assert!((tape.value(text)[k] - (qk + tape.value(ht_gt)[k])).abs() < 1e-15);
            let avg = 0.5 * (tape.value(text)[k] + tape.value(vis)[k]);
            assert!((tape.value(full)[k] - avg).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_is_weighted_sum_of_terms() {
        let f = fixture(4);
        let (total, bpr, mmd, nce, reg) = loss_values(&f, &f.hp, Variant::Full);
        let a = &f.hp.align;
        let want = bpr + a.lambda_cl * nce.unwrap() + a.lambda_mmd * mmd.unwrap() + reg;
        assert!((total - want).abs() < 1e-12);

        let mut tape = Tape::new();
        let vars = f.params.register(&mut tape);
        let raw = regularizer(&mut tape, &vars, Variant::Full).unwrap();
        let direct: f64 = f
            .params
            .named()
            .iter()
            .filter(|(n, _)| !n.ends_with("b_sp"))
            .map(|(_, t)| t.sum_squares())
            .sum();
        assert!((tape.scalar(raw).unwrap() - direct).abs() < 1e-12);
        assert!((reg - f.hp.lambda_reg * direct).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_leave_only_bpr() {
        let f = fixture(5);
        let mut hp = f.hp.clone();
        hp.lambda_reg = 0.0;
        hp.align.lambda_cl = 0.0;
        hp.align.lambda_mmd = 0.0;
        let (total, bpr, mmd, nce, _) = loss_values(&f, &hp, Variant::Full);
        assert_eq!(total, bpr);
        assert!(mmd.is_none() && nce.is_none());
    }

    #[test]
    fn no_ga_total_is_bpr_plus_reg_bitwise() {
        let f = fixture(6);
        let hp = Variant::NoGlobalAlign.apply(&f.hp);
        let (total, bpr, mmd, nce, reg) = loss_values(&f, &hp, Variant::NoGlobalAlign);
        assert_eq!(total.to_bits(), (bpr + reg).to_bits());
        assert!(mmd.is_none() && nce.is_none());
    }

    #[test]
    fn no_la_encodings_are_the_reduced_features() {
        let f = fixture(7);
        let rows: Vec<usize> = (0..8).collect();
        let mut tape = Tape::new();
        let vars = f.params.register(&mut tape);
        let dc = f.hp.dream_config(f.params.d());
        let enc = encode_items(&mut tape, &f.features, &rows, &vars, &dc, Variant::NoLocalAlign).unwrap();
        let xv = tape.constant(f.features.visual.clone());
        let xt = tape.constant(f.features.text.clone());
        let (rv, rt) = reduce_modalities(&mut tape, xv, xt, vars.w_v, vars.w_t).unwrap();
        assert_eq!(tape.value(enc.h_v.unwrap()), tape.value(rv));
        assert_eq!(tape.value(enc.h_t.unwrap()), tape.value(rt));
        let full = encode_items(&mut tape, &f.features, &rows, &vars, &dc, Variant::Full).unwrap();
        assert_eq!(tape.shape(full.h_v.unwrap()), &[8, f.params.d()]);
        assert_ne!(tape.value(full.h_v.unwrap()), tape.value(rv));
    }

    #[test]
    fn frozen_encoding_matches_taped_encoding() {
        let f = fixture(8);
        let rows: Vec<usize> = (0..8).collect();
        let mut tape = Tape::new();
        let vars = f.params.register(&mut tape);
        let dc = f.hp.dream_config(f.params.d());
        let enc = encode_items(&mut tape, &f.features, &rows, &vars, &dc, Variant::Full).unwrap();
        let (hv, ht) = encode_items_frozen(&f.params, &f.features, &f.hp.dilations, Variant::Full).unwrap();
        assert_eq!(hv.unwrap().data(), tape.value(enc.h_v.unwrap()));
        assert_eq!(ht.unwrap().data(), tape.value(enc.h_t.unwrap()));
        let (hv, ht) = encode_items_frozen(&f.params, &f.features, &f.hp.dilations, Variant::TextOnly).unwrap();
        assert!(hv.is_none() && ht.is_some());
    }

    #[test]
    fn graph_free_model_is_matrix_factorisation() {
        let mut f = fixture(9);
        f.hp.graph_layers = 0;
        f.hp.lambda_reg = 0.0;
        f.hp.align.lambda_cl = 0.0;
        f.hp.align.lambda_mmd = 0.0;
        f.params.g_v = Tensor::zeros(f.params.g_v.shape()).unwrap();
        f.params.g_t = Tensor::zeros(f.params.g_t.shape()).unwrap();
        let (total, ..) = loss_values(&f, &f.hp, Variant::Full);
        let p = &f.params;
        let mut want = 0.0;
        for t in &f.batch {
            let x = score(&p.user_emb, &p.item_emb, t.user, t.pos).unwrap()
                - score(&p.user_emb, &p.item_emb, t.user, t.neg).unwrap();
            want += (1.0 + (-x).exp()).ln();
        }
        assert!((total - want).abs() < 1e-12);
        let (eu, ei) = embeddings(p, &f.features, &f.graph, &f.hp, Variant::Full).unwrap();
        assert_eq!(&eu, &p.user_emb);
        assert_eq!(ei.data(), p.item_emb.data());
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let f = fixture(10);
        let report = grad_check(
            |tape, v| {
                let vars = ModelVars::from_ordered(v)?;
                Ok(total_loss(tape, &vars, &f.batch, &f.features, &f.graph, &f.hp, Variant::Full)?.total)
            },
            &f.params.named_owned(),
            &GradCheckConfig {
                tol: 1e-4,
                ..GradCheckConfig::default()
            },
        );
        assert!(report.passed(), "{}", report.to_json());
    }

    #[test]
    fn single_modality_leaves_other_branch_untouched() {
        let f = fixture(11);
        let mut tape = Tape::new();
        let vars = f.params.register(&mut tape);
        let l = total_loss(
            &mut tape,
            &vars,
            &f.batch,
            &f.features,
            &f.graph,
            &f.hp,
            Variant::TextOnly,
        )
        .unwrap();
        assert!(l.mmd.is_none() && l.infonce.is_none());
        let grads = tape.backward(l.total).unwrap();
        assert!(grads.get(vars.w_v).is_none_or(|g| g.iter().all(|x| *x == 0.0)));
        assert!(grads.get(vars.w_t).unwrap().iter().any(|x| *x != 0.0));
    }
}
