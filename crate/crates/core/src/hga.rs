//! Hierarchical group attention.
//!
//! Per-group connector outputs are appended along the token axis. Each token
//! then picks its `M` most similar tokens inside its own group (itself
//! excluded) and its `N` most similar tokens among all other groups. The
//! picked tokens are averaged with softmax weights over their cosine scores,
//! and an elementwise sigmoid gate blends that average with the original
//! token. Nothing here is trainable.

use serde::{Deserialize, Serialize};

use crate::encoders::GroupKind;
use crate::error::{Error, Result};
use crate::numerics::{topk_indices, Matrix, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HgaConfig {
    pub top_m: usize,
    pub top_n: usize,
    pub gate_slope: f64,
    pub gate_shift: f64,
}

impl Default for HgaConfig {
    fn default() -> Self {
        Self {
            top_m: 3,
            top_n: 7,
            gate_slope: 10.0,
            gate_shift: 0.2,
        }
    }
}

impl HgaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_m == 0 {
            return Err(Error::config("hga.top_m", "must be at least 1"));
        }
        if self.top_n == 0 {
            return Err(Error::config("hga.top_n", "must be at least 1"));
        }
        if !(self.gate_slope > 0.0 && self.gate_slope.is_finite()) {
            return Err(Error::config("hga.gate_slope", "must be positive and finite"));
        }
        if !self.gate_shift.is_finite() {
            return Err(Error::config("hga.gate_shift", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupSpan {
    pub group: GroupKind,
    pub start: usize,
    pub len: usize,
}

impl GroupSpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Appended token matrix with the row range of each group.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSequence {
    pub tokens: Matrix,
    pub groups: Vec<GroupSpan>,
}

impl FusedSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn span_of(&self, group: GroupKind) -> Option<&GroupSpan> {
        self.groups.iter().find(|s| s.group == group)
    }

    pub fn group_rows(&self, group: GroupKind) -> Option<Matrix> {
        let s = self.span_of(group)?;
        self.tokens.slice_rows(s.start, s.len).ok()
    }
}

/// Offsets for groups appended in [`GroupKind::APPEND_ORDER`]. Input order
/// does not matter; duplicates are rejected.
pub fn layout(groups: &[(GroupKind, usize)]) -> Result<Vec<GroupSpan>> {
    let mut sorted = groups.to_vec();
    sorted.sort_by_key(|(g, _)| g.index());
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::config("model.encoders", "each encoder group may appear once"));
    }
    let mut start = 0;
    Ok(sorted
        .into_iter()
        .map(|(group, len)| {
            let span = GroupSpan { group, start, len };
            start += len;
            span
        })
        .collect())
}

/// Concatenates per-group hidden states along the token axis.
pub fn sequence_append(parts: &[(GroupKind, Matrix)]) -> Result<FusedSequence> {
    let spans = layout(&parts.iter().map(|(g, m)| (*g, m.rows())).collect::<Vec<_>>())?;
    let ordered: Vec<&Matrix> = spans
        .iter()
        .map(|s| &parts.iter().find(|(g, _)| *g == s.group).expect("span from parts").1)
        .collect();
    if let Some(d) = ordered.first().map(|m| m.cols()) {
        if let Some(bad) = ordered.iter().find(|m| m.cols() != d) {
            return Err(Error::shape("sequence_append", (ordered[0].rows(), d), bad.shape()));
        }
    }
    Ok(FusedSequence {
        tokens: Matrix::concat_rows(&ordered)?,
        groups: spans,
    })
}

/// Picks of one query token, as global row indices with cosine scores,
/// best first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenSelection {
    pub intra: Vec<(usize, f64)>,
    pub inter: Vec<(usize, f64)>,
}

impl TokenSelection {
    pub fn len(&self) -> usize {
        self.intra.len() + self.inter.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Intra picks followed by inter picks.
    pub fn joint(&self) -> impl Iterator<Item = &(usize, f64)> {
        self.intra.iter().chain(&self.inter)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionSet {
    pub tokens: Vec<TokenSelection>,
    /// Groups with fewer than two tokens, which have no intra picks.
    pub degenerate_groups: Vec<GroupKind>,
}

/// Top-`min(M, g - 1)` neighbours of each token within its own group, as
/// local indices. The similarity matrix is multiplied by `1 - I` and the
/// diagonal is then excluded from the candidates, so a token can never pick
/// itself even when all its real neighbours score below zero.
pub fn intra_group_select(group: &Matrix, m: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    let g = group.rows();
    if g < 2 {
        return Ok(vec![Vec::new(); g]);
    }
    let sim = group.cosine_sim(group)?;
    let masked = sim.mul(&Matrix::filled(g, g, 1.0).sub(&Matrix::identity(g))?)?;
    let keep = m.min(g - 1);
    Ok((0..g)
        .map(|i| {
            let candidates: Vec<f64> = (0..g).filter(|&j| j != i).map(|j| masked.get(i, j)).collect();
            topk_indices(&candidates, keep)
                .into_iter()
                .map(|c| {
                    let j = if c < i { c } else { c + 1 };
                    (j, sim.get(i, j))
                })
                .collect()
        })
        .collect())
}

/// Top-`min(N, others.rows)` rows of `others` for each query row, as indices
/// into `others`.
pub fn inter_group_select(query: &Matrix, others: &Matrix, n: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    if others.rows() == 0 {
        return Ok(vec![Vec::new(); query.rows()]);
    }
    let sim = query.cosine_sim(others)?;
    let keep = n.min(others.rows());
    Ok((0..query.rows())
        .map(|i| {
            topk_indices(sim.row(i), keep)
                .into_iter()
                .map(|j| (j, sim.get(i, j)))
                .collect()
        })
        .collect())
}

/// Global rows of every group except `own`, in cross-group candidate order.
pub fn inter_candidates(spans: &[GroupSpan], own: GroupKind) -> Vec<usize> {
    let mut others: Vec<&GroupSpan> = spans.iter().filter(|s| s.group != own).collect();
    others.sort_by_key(|s| s.group.inter_rank());
    others.into_iter().flat_map(|s| s.range()).collect()
}

/// Intra and inter selections for every token of the sequence.
pub fn select(seq: &FusedSequence, cfg: &HgaConfig) -> Result<SelectionSet> {
    cfg.validate()?;
    let mut out = SelectionSet {
        tokens: vec![TokenSelection::default(); seq.len()],
        degenerate_groups: Vec::new(),
    };
    for span in &seq.groups {
        let rows = seq.tokens.slice_rows(span.start, span.len)?;
        if span.len < 2 {
            out.degenerate_groups.push(span.group);
        }
        let intra = intra_group_select(&rows, cfg.top_m)?;
        let cand = inter_candidates(&seq.groups, span.group);
        let others = seq.tokens.gather_rows(&cand)?;
        let inter = inter_group_select(&rows, &others, cfg.top_n)?;
        for (local, (a, e)) in intra.into_iter().zip(inter).enumerate() {
            out.tokens[span.start + local] = TokenSelection {
                intra: a.into_iter().map(|(j, s)| (span.start + j, s)).collect(),
                inter: e.into_iter().map(|(j, s)| (cand[j], s)).collect(),
            };
        }
    }
    Ok(out)
}

/// Softmax-weighted mean of each token's joint selection; a token with no
/// picks keeps its own vector.
pub fn aggregate(seq: &FusedSequence, selections: &SelectionSet) -> Result<Matrix> {
    if selections.tokens.len() != seq.len() {
        return Err(Error::Param {
            op: "aggregate",
            msg: format!("{} selections for {} tokens", selections.tokens.len(), seq.len()),
        });
    }
    let x = &seq.tokens;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for (t, sel) in selections.tokens.iter().enumerate() {
        if sel.is_empty() {
            out.row_mut(t).copy_from_slice(x.row(t));
            continue;
        }
        let scores: Vec<f64> = sel.joint().map(|p| p.1).collect();
        let w = Matrix::new(1, scores.len(), scores)?.softmax_rows();
        for (wj, &(j, _)) in w.data().iter().zip(sel.joint()) {
            if j >= x.rows() {
                return Err(Error::Param {
                    op: "aggregate",
                    msg: format!("selected row {j} out of {}", x.rows()),
                });
            }
            for (o, &v) in out.row_mut(t).iter_mut().zip(x.row(j)) {
                *o += wj * v;
            }
        }
    }
    Ok(out)
}

/// `gate = sigmoid(slope (agg - x - shift))`, `out = x + gate (agg - x)`,
/// all elementwise.
pub fn adaptive_gate(x_in: &Matrix, x_agg: &Matrix, cfg: &HgaConfig) -> Result<Matrix> {
    let d = x_agg.sub(x_in)?;
    let gate = d.add_scalar(-cfg.gate_shift).scale(cfg.gate_slope).sigmoid();
    x_in.add(&gate.mul(&d)?)
}

/// Graph version of select → aggregate → gate. Selection is read off the
/// current value of `x`; gradients flow through the similarity scores, the
/// softmax weights, the mixed rows and the gate.
pub fn hga_on(tape: &mut Tape, x: Var, spans: &[GroupSpan], cfg: &HgaConfig) -> Result<(Var, SelectionSet)> {
    let seq = FusedSequence {
        tokens: tape.value(x).clone(),
        groups: spans.to_vec(),
    };
    let selections = select(&seq, cfg)?;
    let mut parts = Vec::with_capacity(spans.len());
    for span in spans {
        let sels = &selections.tokens[span.range()];
        let width = sels.first().map_or(0, |s| s.len());
        if width == 0 {
            parts.push(tape.slice_rows(x, span.start, span.len)?);
            continue;
        }
        let mut pairs = Vec::with_capacity(span.len * width);
        for (local, s) in sels.iter().enumerate() {
            debug_assert_eq!(s.len(), width);
            pairs.extend(s.joint().map(|&(j, _)| (span.start + local, j)));
        }
        let idx: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let scores = tape.pair_cosine(x, x, pairs, (span.len, width))?;
        let weights = tape.softmax_rows(scores)?;
        parts.push(tape.mix_rows(x, weights, idx)?);
    }
    let agg = tape.concat_rows(&parts)?;
    let d = tape.sub(agg, x)?;
    let z = tape.add_scalar(d, -cfg.gate_shift)?;
    let z = tape.scale(z, cfg.gate_slope)?;
    let gate = tape.sigmoid(z)?;
    let delta = tape.mul(gate, d)?;
    let out = tape.add(x, delta)?;
    Ok((out, selections))
}

/// Full HGA on a fused sequence.
pub fn hga_forward(seq: &FusedSequence, cfg: &HgaConfig) -> Result<(Matrix, SelectionSet)> {
    let mut tape = Tape::new();
    let x = tape.constant(seq.tokens.clone());
    let (out, sel) = hga_on(&mut tape, x, &seq.groups, cfg)?;
    Ok((tape.value(out).clone(), sel))
}
