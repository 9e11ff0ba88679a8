//! Named gradient checks over the library's building blocks, shared by the
//! CLI `gradcheck` command and the acceptance tests.
//!
//! Every case freezes its inputs from a seeded stream, computes analytic
//! gradients by one backward sweep, and compares against central differences
//! at [`GRAD_CHECK_STEP`] on up to [`GRAD_CHECK_COORDS`] coordinates per
//! tensor. A case passes when the worst relative error stays within
//! [`GRAD_CHECK_TOL`].

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    collect_grads, grad_check, leaf_params, BnMode, Graph, NetCtx, NodeId, ParamStore,
    GRAD_CHECK_COORDS, GRAD_CHECK_STEP, GRAD_CHECK_TOL,
};
use crate::error::Result;
use crate::metrics::deep_supervision_g;
use crate::model::{side_upscales, Model, ModelConfig};
use crate::synth::gen_dataset;
use crate::tensor::Tensor;
use crate::wavelet::{edge_head_g, edge_mask_g};
use crate::wega::{cbam, WegaBlock};

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub coords_checked: usize,
    pub pass: bool,
}

type LossFn<'a> = Box<dyn FnMut(&ParamStore) -> Result<f64> + 'a>;

/// Check one loss function's gradients at `params`.
fn check_case(
    name: &'static str,
    params: &ParamStore,
    mut build: impl FnMut(&ParamStore) -> Result<(f64, Graph, BTreeMap<String, NodeId>, NodeId)>,
    seed: u64,
) -> Result<SuiteCase> {
    let (_, mut g, ids, loss) = build(params)?;
    g.backward(loss)?;
    let analytic = collect_grads(&g, &ids, params);
    let f: LossFn = Box::new(|ps| build(ps).map(|r| r.0));
    let report = grad_check(params, &analytic, f, GRAD_CHECK_STEP, GRAD_CHECK_COORDS, seed)?;
    Ok(SuiteCase {
        name,
        max_rel_err: report.max_rel_err,
        worst_param: report.worst_param,
        coords_checked: report.coords_checked,
        pass: report.max_rel_err <= GRAD_CHECK_TOL,
    })
}

/// Weighted-sum scalar so the loss sees every output coordinate with a
/// distinct sensitivity.
fn weighted_sum(g: &mut Graph, x: NodeId, w: &Tensor) -> Result<NodeId> {
    let wid = g.constant(w.clone());
    let prod = g.mul(x, wid)?;
    Ok(g.sum_all(prod))
}

/// Run the whole suite, or the subset whose names contain `only`.
/// `full_model` is by far the slowest case; filter it out for quick runs.
pub fn run_suite(seed: u64, only: Option<&str>) -> Result<Vec<SuiteCase>> {
    let wants = |name: &str| only.map_or(true, |f| name.contains(f));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    if wants("edge_head") {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::uniform([1, 2, 8, 8], -1.0, 1.0, &mut rng));
        let w = Tensor::uniform([1, 6, 8, 8], -1.0, 1.0, &mut rng);
        out.push(check_case(
            "edge_head",
            &params.clone(),
            |ps| {
                let mut g = Graph::new();
                let ids = leaf_params(&mut g, ps);
                let y = edge_head_g(&mut g, ids["x"])?;
                let loss = weighted_sum(&mut g, y, &w)?;
                Ok((g.value(loss).data()[0], g, ids, loss))
            },
            seed ^ 1,
        )?);
    }

    if wants("edge_mask") {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::uniform([1, 1, 8, 8], -1.0, 1.0, &mut rng));
        let w = Tensor::uniform([1, 1, 8, 8], -1.0, 1.0, &mut rng);
        out.push(check_case(
            "edge_mask",
            &params.clone(),
            |ps| {
                let mut g = Graph::new();
                let ids = leaf_params(&mut g, ps);
                let y = edge_mask_g(&mut g, ids["x"])?;
                let loss = weighted_sum(&mut g, y, &w)?;
                Ok((g.value(loss).data()[0], g, ids, loss))
            },
            seed ^ 2,
        )?);
    }

    if wants("cbam") {
        let blk = WegaBlock::new("blk", 4, 2)?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        blk.init(&mut params, &mut buffers, &mut rng);
        params.insert("x", Tensor::uniform([1, 4, 6, 6], -1.0, 1.0, &mut rng));
        let w = Tensor::uniform([1, 4, 6, 6], -1.0, 1.0, &mut rng);
        out.push(check_case(
            "cbam",
            &params.clone(),
            |ps| {
                let mut g = Graph::new();
                let ids = leaf_params(&mut g, ps);
                let mut ctx = NetCtx::new(&mut g, &ids, &buffers, BnMode::Eval);
                let y = cbam(&mut ctx, "blk.cbam", ids["x"])?;
                let loss = weighted_sum(&mut g, y, &w)?;
                Ok((g.value(loss).data()[0], g, ids, loss))
            },
            seed ^ 3,
        )?);
    }

    if wants("wega_block") {
        let blk = WegaBlock::new("blk", 4, 2)?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        blk.init(&mut params, &mut buffers, &mut rng);
        params.insert("f", Tensor::uniform([1, 4, 8, 8], -1.0, 1.0, &mut rng));
        params.insert("p", Tensor::uniform([1, 1, 4, 4], -1.0, 1.0, &mut rng));
        let w = Tensor::uniform([1, 4, 8, 8], -1.0, 1.0, &mut rng);
        out.push(check_case(
            "wega_block",
            &params.clone(),
            |ps| {
                let mut g = Graph::new();
                let ids = leaf_params(&mut g, ps);
                let mut ctx = NetCtx::new(&mut g, &ids, &buffers, BnMode::Train { momentum: 0.1 });
                let y = blk.apply(&mut ctx, ids["f"], ids["p"], 2)?;
                let loss = weighted_sum(&mut g, y.out, &w)?;
                Ok((g.value(loss).data()[0], g, ids, loss))
            },
            seed ^ 4,
        )?);
    }

    if wants("bce_dice") {
        let mut params = ParamStore::new();
        params.insert("logits", Tensor::uniform([1, 1, 6, 6], -3.0, 3.0, &mut rng));
        let target = Tensor::from_fn([1, 1, 6, 6], |_, _, y, x| ((y * 7 + x) % 3 == 0) as u8 as f64);
        out.push(check_case(
            "bce_dice",
            &params.clone(),
            |ps| {
                let mut g = Graph::new();
                let ids = leaf_params(&mut g, ps);
                let loss = crate::metrics::bce_dice_g(&mut g, ids["logits"], &target)?;
                Ok((g.value(loss).data()[0], g, ids, loss))
            },
            seed ^ 5,
        )?);
    }

    if wants("full_model") {
        let mut cfg = ModelConfig::with_lr(0.1);
        cfg.channels = vec![2, 2, 2, 2, 2];
        cfg.seed = seed;
        let model = Model::new(cfg)?;
        let data = gen_dataset(1, 64, seed ^ 6)?;
        let imgs = data[0].image.clone();
        let masks = data[0].mask.clone();
        let buffers = model.buffers.clone();
        let config = model.config.clone();
        out.push(check_case(
            "full_model",
            &model.params.clone(),
            |ps| {
                let m = Model {
                    config: config.clone(),
                    params: ps.clone(),
                    buffers: buffers.clone(),
                    velocities: ParamStore::new(),
                    epochs_trained: 0,
                };
                let (mut pass, _) = m.build_pass(&imgs, BnMode::Train { momentum: 0.1 })?;
                let ups = side_upscales();
                let sides: Vec<(NodeId, usize)> =
                    pass.sides.iter().copied().zip(ups.iter().copied()).collect();
                let loss = deep_supervision_g(&mut pass.g, &sides, &masks)?;
                Ok((pass.g.value(loss).data()[0], pass.g, pass.ids, loss))
            },
            seed ^ 7,
        )?);
    }

    Ok(out)
}
