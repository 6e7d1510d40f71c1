use super::{Ctx, Decoder, Encoder, INDICATOR_TOL};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Pointwise (`M x L`) and global (`L`) features of one cloud.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePair {
    pub pointwise: Var,
    pub global: Var,
}

/// Shared per-point MLP `3 -> hidden.. -> L` with batch norm and leaky ReLU
/// after every layer; the global feature is the column-wise max.
pub fn encode(ctx: &mut Ctx<'_>, g: &mut Graph, which: Encoder, cloud: Var) -> Result<FeaturePair> {
    let s = g.shape(cloud);
    if s.len() != 2 || s[1] != 3 || s[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: s.to_vec(),
            rhs: vec![0, 3],
        });
    }
    let layers = ctx.arch().encoder_hidden.len() + 1;
    let slope = ctx.arch().leaky_slope;
    let mut x = cloud;
    for k in 0..layers {
        x = ctx.linear(g, x, &format!("{}.l{k}", which.prefix()))?;
        x = ctx.batch_norm(g, x, &format!("{}.bn{k}", which.prefix()))?;
        x = g.leaky_relu(x, slope);
    }
    let global = g.max_pool(x, 0)?;
    Ok(FeaturePair { pointwise: x, global })
}

/// Per-point residual `R_i = MLP([F_i; G^p; G^d; indicator])`, `M x 3`.
pub fn predict_residual(
    ctx: &mut Ctx<'_>,
    g: &mut Graph,
    fp: Var,
    gp: Var,
    gd: Var,
    indicator: Var,
) -> Result<Var> {
    let norm = g.value(indicator).data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if !((norm - 1.0).abs() <= INDICATOR_TOL) {
        return Err(Error::IndicatorOffSphere(norm));
    }
    let m = g.shape(fp)[0];
    let rows: Vec<Var> = [gp, gd, indicator]
        .into_iter()
        .map(|v| g.repeat_rows(v, m))
        .collect::<Result<_>>()?;
    let mut x = g.concat(&[fp, rows[0], rows[1], rows[2]], 1)?;
    let hidden = ctx.arch().residual_hidden.len();
    let slope = ctx.arch().leaky_slope;
    for k in 0..hidden {
        x = ctx.linear(g, x, &format!("res.l{k}"))?;
        x = ctx.batch_norm(g, x, &format!("res.bn{k}"))?;
        x = g.leaky_relu(x, slope);
    }
    ctx.linear(g, x, &format!("res.l{hidden}"))
}

fn attention(ctx: &mut Ctx<'_>, g: &mut Graph, x: Var, kv: Var, name: &str) -> Result<Var> {
    let heads = ctx.arch().heads;
    let d = ctx.arch().feat / heads;
    let q = ctx.linear(g, x, &format!("{name}.q"))?;
    let k = ctx.linear(g, kv, &format!("{name}.k"))?;
    let v = ctx.linear(g, kv, &format!("{name}.v"))?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * d, (h + 1) * d)?;
        let kh = g.slice_cols(k, h * d, (h + 1) * d)?;
        let vh = g.slice_cols(v, h * d, (h + 1) * d)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, 1.0 / (d as f64).sqrt());
        let a = g.softmax(s, 1)?;
        outs.push(g.matmul(a, vh)?);
    }
    let cat = g.concat(&outs, 1)?;
    ctx.linear(g, cat, &format!("{name}.o"))
}

/// `x + MHA(x, kv, kv)` followed by `x + MLP(x)`.
fn attend_block(ctx: &mut Ctx<'_>, g: &mut Graph, x: Var, kv: Option<Var>, name: &str) -> Result<Var> {
    let slope = ctx.arch().leaky_slope;
    let a = attention(ctx, g, x, kv.unwrap_or(x), name)?;
    let x = g.add(x, a)?;
    let h = ctx.linear(g, x, &format!("{name}.mlp0"))?;
    let h = g.leaky_relu(h, slope);
    let h = ctx.linear(g, h, &format!("{name}.mlp1"))?;
    g.add(x, h)
}

/// Attention over part nodes (`N_p x L`) interleaving self-attention with
/// cross-attention to the stacked globals `[G^p; G^d]`, then a per-part
/// regressor to six numbers: center displacement and raw log-scales.
pub fn agnn_deform(ctx: &mut Ctx<'_>, g: &mut Graph, parts: Var, gp: Var, gd: Var) -> Result<Var> {
    let l = ctx.arch().feat;
    let gp = g.reshape(gp, &[1, l])?;
    let gd = g.reshape(gd, &[1, l])?;
    let globals = g.concat(&[gp, gd], 0)?;
    let mut x = parts;
    for b in 0..ctx.arch().agnn_blocks {
        x = attend_block(ctx, g, x, None, &format!("agnn.b{b}.self"))?;
        x = attend_block(ctx, g, x, Some(globals), &format!("agnn.b{b}.cross"))?;
    }
    let depth = ctx.arch().regressor_hidden.len();
    let slope = ctx.arch().leaky_slope;
    for k in 0..depth {
        x = ctx.linear(g, x, &format!("reg.l{k}"))?;
        x = g.leaky_relu(x, slope);
    }
    ctx.linear(g, x, &format!("reg.l{depth}"))
}

/// Decode a global feature into an `M x 3` cloud.
pub fn reconstruct(ctx: &mut Ctx<'_>, g: &mut Graph, which: Decoder, global: Var) -> Result<Var> {
    let l = ctx.arch().feat;
    let m = ctx.arch().points;
    let depth = ctx.arch().recon_hidden.len();
    let slope = ctx.arch().leaky_slope;
    let mut x = g.reshape(global, &[1, l])?;
    for k in 0..depth {
        x = ctx.linear(g, x, &format!("{}.l{k}", which.prefix()))?;
        x = g.leaky_relu(x, slope);
    }
    let x = ctx.linear(g, x, &format!("{}.l{depth}", which.prefix()))?;
    g.reshape(x, &[m, 3])
}

/// Positive axis scales `exp(clamp(raw, -2, 2))`.
pub fn scales_from_raw(raw: [f64; 3]) -> [f64; 3] {
    raw.map(|r| r.clamp(-2.0, 2.0).exp())
}

pub fn scales_from_raw_var(g: &mut Graph, raw: Var) -> Var {
    let c = g.clamp(raw, -2.0, 2.0);
    g.exp(c)
}
