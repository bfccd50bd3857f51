//! Seeded gradient-check suite over the model's differentiable pieces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::align::{infonce, mmd_squared, AlignConfig};
use crate::autograd::Tape;
use crate::dream::{dream_forward, DreamParams, DreamVars};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::model::{
    bpr_loss, target_dim, total_loss, Graph, HyperParams, ItemFeatures, ModelParams, ModelVars, Triple, Variant,
};
use crate::tensor::Tensor;

/// Size of the check instance.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteSpec {
    pub users: usize,
    pub items: usize,
    pub d_visual: usize,
    pub d_text: usize,
    pub reduction: usize,
    pub branch_channels: usize,
    pub seed: u64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            users: 5,
            items: 8,
            d_visual: 40,
            d_text: 32,
            reduction: 2,
            branch_channels: 4,
            seed: 0,
        }
    }
}

/// Result of one group of the suite.
#[derive(Clone, Debug)]
pub struct GroupReport {
    pub group: &'static str,
    pub report: GradCheckReport,
}

impl GroupReport {
    pub fn to_json(&self) -> Value {
        let mut v = self.report.to_json();
        v.as_object_mut()
            .expect("report is an object")
            .insert("group".into(), json!(self.group));
        v
    }
}

/// Checks DREAM, MMD, InfoNCE, BPR and the full objective with `cfg`.
pub fn gradcheck_suite(spec: &SuiteSpec, cfg: &GradCheckConfig) -> Result<Vec<GroupReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = target_dim(spec.d_visual, spec.d_text, spec.reduction)?;
    let hp = HyperParams {
        reduction: spec.reduction,
        d_id: d,
        branch_channels: spec.branch_channels,
        ..HyperParams::default()
    };
    hp.validate()?;
    let (m, n) = (spec.users, spec.items);
    let mut out = Vec::new();

    let dream_cfg = hp.dream_config(d);
    let dream = DreamParams::init(&dream_cfg, &mut rng)?;
    let mut params = vec![("input".to_string(), Tensor::random_uniform(&[n, d], &mut rng)?)];
    params.extend(dream.named().into_iter().map(|(k, t)| (k, t.clone())));
    let readout = Tensor::random_uniform(&[n, d], &mut rng)?;
    let report = grad_check(
        |tape, v| {
            let p = DreamVars::from_ordered(&v[1..])?;
            let y = dream_forward(tape, v[0], &p, &dream_cfg)?;
            let r = tape.constant(readout.clone());
            let w = tape.mul(y, r)?;
            tape.sum(w)
        },
        &params,
        cfg,
    );
    out.push(GroupReport { group: "dream", report });

    let pair = vec![
        ("v".to_string(), Tensor::random_uniform(&[n, d], &mut rng)?),
        ("t".to_string(), Tensor::random_uniform(&[n, d], &mut rng)?),
    ];
    let align = AlignConfig::default();
    let report = grad_check(|tape, v| mmd_squared(tape, v[0], v[1], &align), &pair, cfg);
    out.push(GroupReport { group: "mmd", report });
    let report = grad_check(
        |tape, v| infonce(tape, v[0], v[1], align.tau, align.symmetric),
        &pair,
        cfg,
    );
    out.push(GroupReport {
        group: "infonce",
        report,
    });

    let triples: Vec<Triple> = (0..m)
        .map(|u| Triple {
            user: u,
            pos: u % n,
            neg: (u + 3) % n,
        })
        .collect();
    let emb = vec![
        ("e_u".to_string(), Tensor::random_uniform(&[m, d], &mut rng)?),
        ("e_i".to_string(), Tensor::random_uniform(&[n, d], &mut rng)?),
    ];
    let report = grad_check(|tape, v| bpr_loss(tape, v[0], v[1], &triples), &emb, cfg);
    out.push(GroupReport { group: "bpr", report });

    let features = ItemFeatures::new(
        Tensor::random_uniform(&[n, spec.d_visual], &mut rng)?,
        Tensor::random_uniform(&[n, spec.d_text], &mut rng)?,
    )?;
    let model = ModelParams::init(m, n, spec.d_visual, spec.d_text, &hp, &mut rng)?;
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|u| [(u, u % n), (u, (u + 1) % n)]).collect();
    let graph = Graph::from_pairs(m, n, &pairs)?;
    let report = grad_check(
        |tape: &mut Tape, v| {
            let vars = ModelVars::from_ordered(v)?;
            Ok(total_loss(tape, &vars, &triples, &features, &graph, &hp, Variant::Full)?.total)
        },
        &model.named_owned(),
        cfg,
    );
    out.push(GroupReport {
        group: "total_loss",
        report,
    });
    Ok(out)
}
