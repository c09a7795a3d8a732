//! Scaled dot-product self-attention over spatial feature-map tokens.
//!
//! Feature maps are unrolled into L×D token matrices (one token per spatial
//! position, D = channels), attended jointly, and scattered back to their
//! source positions. Three call sites: within-class support maps,
//! prototypes, and query-against-prototypes. By default Q = K = V (raw
//! features, no learned projections).

use crate::tensor::{Result, Tape, TensorError, Var};

/// Token matrix plus the (image, h, w) origin of every row, a bijection onto
/// the source spatial positions.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Var,
    pub provenance: Vec<TokenSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSource {
    pub image: usize,
    pub h: usize,
    pub w: usize,
}

/// Optional learned Q/K/V projections (D×D each), for the ablation mode.
#[derive(Debug, Clone, Copy)]
pub struct Projections {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` with row-wise softmax.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (
        tape.value(q).shape().to_vec(),
        tape.value(k).shape().to_vec(),
        tape.value(v).shape().to_vec(),
    );
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(TensorError::ShapeMismatch {
            op: "scaled_dot_attention",
            left: qs,
            right: ks,
        });
    }
    let d_k = qs[1];
    let kt = tape.permute(k, &[1, 0])?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scalar_mul(scores, 1.0 / (d_k as f64).sqrt())?;
    let weights = tape.softmax(scaled, 1)?;
    tape.matmul(weights, v)
}

/// Self-attention (Q = K = V), optionally through learned projections.
pub fn self_attention(tape: &mut Tape, tokens: Var, proj: Option<&Projections>) -> Result<Var> {
    match proj {
        None => scaled_dot_attention(tape, tokens, tokens, tokens),
        Some(p) => {
            let q = tape.matmul(tokens, p.wq)?;
            let k = tape.matmul(tokens, p.wk)?;
            let v = tape.matmul(tokens, p.wv)?;
            scaled_dot_attention(tape, q, k, v)
        }
    }
}

/// Unroll (K,C,H,W) maps into a (K·H·W)×C token grid with provenance.
pub fn build_token_grid(tape: &mut Tape, maps: Var) -> Result<TokenGrid> {
    let shape = tape.value(maps).shape().to_vec();
    if shape.len() != 4 {
        return Err(TensorError::InvalidShape {
            op: "build_token_grid",
            expected: "rank-4 maps (K,C,H,W)",
            shape,
        });
    }
    let (k, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let khwc = tape.permute(maps, &[0, 2, 3, 1])?;
    let tokens = tape.reshape(khwc, vec![k * h * w, c])?;
    let mut provenance = Vec::with_capacity(k * h * w);
    for image in 0..k {
        for y in 0..h {
            for x in 0..w {
                provenance.push(TokenSource { image, h: y, w: x });
            }
        }
    }
    Ok(TokenGrid { tokens, provenance })
}

/// Inverse of [`build_token_grid`]: scatter an L×C token matrix back into
/// (K,C,H,W) maps.
pub fn scatter_token_grid(
    tape: &mut Tape,
    tokens: Var,
    k: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<Var> {
    let khwc = tape.reshape(tokens, vec![k, h, w, c])?;
    tape.permute(khwc, &[0, 3, 1, 2])
}

/// Jointly self-attend all spatial positions of the K support maps of one
/// class and split the refined tokens back into K maps.
pub fn class_support_attention(
    tape: &mut Tape,
    per_class_maps: Var,
    proj: Option<&Projections>,
) -> Result<Var> {
    let shape = tape.value(per_class_maps).shape().to_vec();
    if shape.len() != 4 {
        return Err(TensorError::InvalidShape {
            op: "class_support_attention",
            expected: "rank-4 maps (K,C,H,W)",
            shape,
        });
    }
    let (k, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let grid = build_token_grid(tape, per_class_maps)?;
    let refined = self_attention(tape, grid.tokens, proj)?;
    scatter_token_grid(tape, refined, k, c, h, w)
}

/// Self-attention over N prototype vectors (N×D).
pub fn prototype_attention(
    tape: &mut Tape,
    prototypes: Var,
    proj: Option<&Projections>,
) -> Result<Var> {
    let shape = tape.value(prototypes).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(TensorError::InvalidShape {
            op: "prototype_attention",
            expected: "non-empty rank-2 prototypes (N,D)",
            shape,
        });
    }
    self_attention(tape, prototypes, proj)
}

/// Joint token set over one query map and the N prototype maps; both sides
/// come back refined.
pub fn query_prototype_attention(
    tape: &mut Tape,
    query_map: Var,
    prototype_maps: Var,
    proj: Option<&Projections>,
) -> Result<(Var, Var)> {
    let qs = tape.value(query_map).shape().to_vec();
    let ps = tape.value(prototype_maps).shape().to_vec();
    if qs.len() != 3 || ps.len() != 4 || qs[..] != ps[1..] {
        return Err(TensorError::ShapeMismatch {
            op: "query_prototype_attention",
            left: qs,
            right: ps,
        });
    }
    let (n, c, h, w) = (ps[0], ps[1], ps[2], ps[3]);
    let query4 = tape.reshape(query_map, vec![1, c, h, w])?;
    let joint = tape.concat(&[query4, prototype_maps], 0)?;
    let refined = class_support_attention(tape, joint, proj)?;
    let refined_query4 = tape.slice(refined, 0, 0, 1)?;
    let refined_query = tape.reshape(refined_query4, vec![c, h, w])?;
    let refined_protos = tape.slice(refined, 0, 1, n)?;
    Ok((refined_query, refined_protos))
}

/// Which attention refinements an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    ClassSupport,
    Prototypes,
    QueryPrototype,
    Combined,
}

impl AttentionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "class_support" => Some(Self::ClassSupport),
            "prototypes" => Some(Self::Prototypes),
            "query_prototype" => Some(Self::QueryPrototype),
            "combined" => Some(Self::Combined),
            _ => None,
        }
    }

    pub fn refines_support(self) -> bool {
        matches!(self, Self::ClassSupport | Self::Combined)
    }

    pub fn refines_prototypes(self) -> bool {
        matches!(self, Self::Prototypes | Self::Combined)
    }

    pub fn refines_query(self) -> bool {
        matches!(self, Self::QueryPrototype | Self::Combined)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub mode: AttentionMode,
    /// Embedder blocks after which class-support attention also runs
    /// (mirrors the StyleMix hook points). Empty = final features only.
    pub slots: Vec<usize>,
    pub learned_projections: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            mode: AttentionMode::ClassSupport,
            slots: Vec::new(),
            learned_projections: false,
        }
    }
}
