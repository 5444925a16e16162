//! Segmentation-vision-text sequence assembly and last-token pooling.

use serde::{Deserialize, Serialize};

use crate::encoders::TextEmbeddings;
use crate::error::{Error, Result};
use crate::numkernel::{KernelError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Seg,
    Vision,
    Text,
}

/// Prompt template with an optional `{bbox}` slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstruction {
    pub id: String,
    pub template: String,
}

pub const SCAR_INSTRUCTION: &str = "Find the caption that best describes the segmented object, considering both local details and global context in the given image. Referring object bbox: {bbox}.";

impl TaskInstruction {
    pub fn new(id: &str, template: &str) -> Result<TaskInstruction> {
        if id.trim().is_empty() || template.trim().is_empty() {
            return Err(Error::Validation("instruction id and template must be non-empty".into()));
        }
        Ok(TaskInstruction {
            id: id.to_string(),
            template: template.to_string(),
        })
    }

    /// Region-captioning query instruction.
    pub fn scar() -> TaskInstruction {
        TaskInstruction::new("scar", SCAR_INSTRUCTION).expect("static")
    }

    /// Prefix used for caption targets.
    pub fn caption() -> TaskInstruction {
        TaskInstruction::new("caption", "Caption:").expect("static")
    }

    /// Resolves a built-in instruction id.
    pub fn by_id(id: &str) -> Result<TaskInstruction> {
        match id {
            "scar" => Ok(TaskInstruction::scar()),
            "caption" => Ok(TaskInstruction::caption()),
            other => Err(Error::Validation(format!("unknown instruction id {other:?}"))),
        }
    }

    pub fn has_bbox_slot(&self) -> bool {
        self.template.contains("{bbox}")
    }

    /// Fills the `{bbox}` slot (if any) with `bbox_text`.
    pub fn render(&self, bbox_text: Option<&str>) -> Result<String> {
        match (self.has_bbox_slot(), bbox_text) {
            (true, Some(b)) => Ok(self.template.replace("{bbox}", b)),
            (true, None) => Err(Error::Validation(format!(
                "instruction {:?} needs a bbox",
                self.id
            ))),
            (false, _) => Ok(self.template.clone()),
        }
    }
}

/// Concatenated token rows with a segment tag per row. Positions are the
/// row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub tokens: Tensor,
    pub tags: Vec<Segment>,
    pub text_ids: Vec<usize>,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        0..self.len()
    }

    /// Row range of a segment (empty when absent).
    pub fn span(&self, seg: Segment) -> std::ops::Range<usize> {
        let start = self.tags.iter().position(|t| *t == seg).unwrap_or(0);
        let n = self.tags.iter().filter(|t| **t == seg).count();
        if n == 0 {
            0..0
        } else {
            start..start + n
        }
    }
}

/// Orders blocks segmentation, vision, text. Segmentation tokens require
/// vision tokens.
pub fn assemble(
    seg: Option<&Tensor>,
    vision: Option<&Tensor>,
    text: Option<&TextEmbeddings>,
) -> Result<EmbeddingSequence> {
    if seg.is_some() && vision.is_none() {
        return Err(Error::Contract(
            "segmentation tokens supplied without vision tokens".into(),
        ));
    }
    let parts: Vec<(Segment, &Tensor)> = [
        seg.map(|t| (Segment::Seg, t)),
        vision.map(|t| (Segment::Vision, t)),
        text.map(|t| (Segment::Text, &t.tokens)),
    ]
    .into_iter()
    .flatten()
    .collect();
    if parts.is_empty() {
        return Err(Error::EmptyInput("no image or text to embed".into()));
    }
    let width = parts[0].1.dims2()?.1;
    let mut tags = Vec::new();
    for (seg, t) in &parts {
        let (n, w) = t.dims2()?;
        if w != width {
            return Err(KernelError::Dimension(format!(
                "{seg:?} block width {w} differs from {width}"
            ))
            .into());
        }
        tags.extend(std::iter::repeat_n(*seg, n));
    }
    let blocks: Vec<&Tensor> = parts.iter().map(|(_, t)| *t).collect();
    Ok(EmbeddingSequence {
        tokens: Tensor::concat_rows(&blocks)?,
        tags,
        text_ids: text.map(|t| t.token_ids.clone()).unwrap_or_default(),
    })
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEmbedding {
    vector: Tensor,
}

impl UnitEmbedding {
    /// Normalises `v`; a zero vector is an error.
    pub fn normalize(v: &Tensor) -> Result<UnitEmbedding> {
        let n = v.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate("cannot normalise a zero vector".into()));
        }
        let values = v.data().iter().map(|x| x / n).collect();
        Ok(UnitEmbedding {
            vector: Tensor::with_dtype(vec![v.len()], values, v.dtype())?,
        })
    }

    /// Wraps a vector that is already unit norm (within 1e-6).
    pub fn from_unit(values: Vec<f64>) -> Result<UnitEmbedding> {
        let t = Tensor::vector(values);
        if (t.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("vector norm {} is not 1", t.norm())));
        }
        Ok(UnitEmbedding { vector: t })
    }

    pub fn vector(&self) -> &Tensor {
        &self.vector
    }

    pub fn values(&self) -> &[f64] {
        self.vector.data()
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Cosine similarity, which for unit vectors is the dot product,
    /// clamped to `[-1, 1]`.
    pub fn cosine(&self, other: &UnitEmbedding) -> Result<f64> {
        Ok(self.vector.dot(&other.vector)?.clamp(-1.0, 1.0))
    }
}

pub struct PoolCache {
    rows: usize,
    norm: f64,
    unit: Tensor,
}

/// Last row of `hidden`, L2-normalised.
pub fn pool_last(hidden: &Tensor) -> Result<(UnitEmbedding, PoolCache)> {
    let (rows, d) = hidden.dims2()?;
    if rows == 0 {
        return Err(Error::EmptyInput("cannot pool an empty sequence".into()));
    }
    let last = Tensor::vector(hidden.row(rows - 1).to_vec());
    let norm = last.norm();
    let z = UnitEmbedding::normalize(&last)?;
    let unit = z.vector.clone();
    debug_assert_eq!(unit.len(), d);
    Ok((z, PoolCache { rows, norm, unit }))
}

/// Gradient of the pooled unit vector with respect to the hidden states:
/// `(dz − z (z·dz)) / ‖h‖` on the last row, zero elsewhere.
pub fn pool_last_backward(cache: &PoolCache, dz: &Tensor) -> Result<Tensor> {
    let d = cache.unit.len();
    let proj = cache.unit.dot(dz)?;
    let mut out = Tensor::zeros(&[cache.rows, d]);
    for (j, o) in out.row_mut(cache.rows - 1).iter_mut().enumerate() {
        *o = (dz.data()[j] - cache.unit.data()[j] * proj) / cache.norm;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(n: usize, w: usize) -> TextEmbeddings {
        TextEmbeddings {
            tokens: Tensor::full(&[n, w], 0.5),
            token_ids: vec![2; n],
        }
    }

    #[test]
    fn order_and_tags() {
        let s = Tensor::full(&[3, 4], 1.0);
        let v = Tensor::full(&[2, 4], 2.0);
        let t = text(5, 4);
        let seq = assemble(Some(&s), Some(&v), Some(&t)).unwrap();
        assert_eq!(seq.len(), 10);
        assert_eq!(seq.span(Segment::Seg), 0..3);
        assert_eq!(seq.span(Segment::Vision), 3..5);
        assert_eq!(seq.span(Segment::Text), 5..10);
        assert_eq!(seq.tokens.row(4), &[2.0; 4]);
        let only = assemble(None, None, Some(&t)).unwrap();
        assert!(only.tags.iter().all(|g| *g == Segment::Text));
    }

    #[test]
    fn contract_errors() {
        let s = Tensor::full(&[3, 4], 1.0);
        assert!(matches!(assemble(Some(&s), None, Some(&text(1, 4))), Err(Error::Contract(_))));
        assert!(matches!(assemble(None, None, None), Err(Error::EmptyInput(_))));
        assert!(assemble(None, Some(&s), Some(&text(1, 5))).is_err());
    }

    #[test]
    fn pooling() {
        let h = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let (z, _) = pool_last(&h).unwrap();
        assert_eq!(z.values(), &[0.6, 0.8]);
        let h2 = Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(pool_last(&h2).unwrap().0.values(), &[0.0, 1.0]);
        let zero = Tensor::zeros(&[2, 3]);
        assert!(matches!(pool_last(&zero), Err(Error::Degenerate(_))));
    }

    #[test]
    fn instruction_render() {
        let i = TaskInstruction::scar();
        let s = i.render(Some("[1.00, 2.00, 3.00, 4.00]")).unwrap();
        assert!(s.ends_with("Referring object bbox: [1.00, 2.00, 3.00, 4.00]."));
        assert!(i.render(None).is_err());
        assert_eq!(TaskInstruction::caption().render(None).unwrap(), "Caption:");
        assert!(TaskInstruction::new("", "x").is_err());
    }
}
