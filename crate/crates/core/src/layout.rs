//! Input sequence construction.
//!
//! Every sequence has the same length and shape:
//!
//! ```text
//! [TT] [segment A] [segment B] [segment C] [cls]
//! ```
//!
//! where the three segments are the current report, the current image and
//! the previous image (or a learnable pad segment when there is no prior
//! study). Each segment is framed by its own START/STOP pair. Training
//! draws a uniformly random segment order for every fetch; inference puts
//! the segment to be generated last.
//!
//! The report segment has a fixed slot of `N_r + 2` positions: `START`,
//! the words, `STOP`, then `PAD` fill that is never scored.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Number of temporal-token buckets, including bucket 0 ("no prior").
pub const TT_BUCKETS: usize = 9;

/// Maps the interval between studies to a temporal-token bucket:
/// none → 0, `δ ≤ 1` → 1, `δ ≤ 2` → 2, `δ ≤ 4` → 3, … capped at 8 (`δ > 64`).
pub fn bucketize_delta(delta_days: Option<f64>) -> Result<usize> {
    match delta_days {
        None => Ok(0),
        Some(d) if d.is_nan() || d <= 0.0 => Err(invalid(format!("interval must be positive, got {d}"))),
        Some(d) if d <= 1.0 => Ok(1),
        Some(d) => Ok(((1.0 + d.log2().ceil()) as usize).min(TT_BUCKETS - 1)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Special {
    ReportStart,
    ReportStop,
    CurrentStart,
    CurrentStop,
    PreviousStart,
    PreviousStop,
    Pad,
    Cls,
}

const SPECIALS: usize = 8;

/// Unified id space: words, then image codes, then temporal buckets, then
/// framing/pad/cls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub words: usize,
    pub image_codes: usize,
}

impl Vocab {
    pub fn new(words: usize, image_codes: usize) -> Self {
        Self { words, image_codes }
    }

    pub fn word(&self, w: usize) -> usize {
        debug_assert!(w < self.words);
        w
    }

    pub fn image(&self, code: usize) -> usize {
        debug_assert!(code < self.image_codes);
        self.words + code
    }

    pub fn temporal(&self, bucket: usize) -> usize {
        debug_assert!(bucket < TT_BUCKETS);
        self.words + self.image_codes + bucket
    }

    pub fn special(&self, s: Special) -> usize {
        self.words + self.image_codes + TT_BUCKETS + s as usize
    }

    pub fn total(&self) -> usize {
        self.words + self.image_codes + TT_BUCKETS + SPECIALS
    }

    pub fn word_range(&self) -> Range<usize> {
        0..self.words
    }

    pub fn image_range(&self) -> Range<usize> {
        self.words..self.words + self.image_codes
    }

    pub fn image_code(&self, id: usize) -> Option<usize> {
        self.image_range().contains(&id).then(|| id - self.words)
    }
}

/// Token counts of the two segment kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    /// Image tokens per scan (a perfect square).
    pub n_x: usize,
    /// Report word slots.
    pub n_r: usize,
}

impl Geometry {
    pub fn total_len(&self) -> usize {
        1 + (self.n_r + 2) + 2 * (self.n_x + 2) + 1
    }

    pub fn grid_side(&self) -> Result<usize> {
        let side = (self.n_x as f64).sqrt().round() as usize;
        if side * side != self.n_x {
            return Err(invalid(format!("{} image tokens do not form a square grid", self.n_x)));
        }
        Ok(side)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    CurrentReport,
    CurrentImage,
    PreviousImage,
    PreviousPad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosScheme {
    SinusoidalText,
    AxialImage,
    LearnedPad,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySegment {
    pub kind: SegmentKind,
    pub ids: Vec<usize>,
    pub scheme: PosScheme,
}

/// Where a position's non-token embedding comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedSource {
    Temporal,
    Cls,
    /// START/STOP of an image segment.
    Framing,
    /// Index inside the report segment (START is 0).
    Text(usize),
    /// Grid cell of an image token. The previous image has its own axial
    /// tables, stacked after the current image's.
    Image { row: usize, col: usize, previous: bool },
    /// Index inside the pad segment.
    Pad(usize),
}

impl EmbedSource {
    /// Rows of the stacked `[2·side, d]` axial row and column tables.
    pub fn axial_rows(&self, side: usize) -> Option<(usize, usize)> {
        match *self {
            EmbedSource::Image { row, col, previous } => {
                let base = if previous { side } else { 0 };
                Some((base + row, base + col))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    InferReport,
    InferImage,
}

/// All six orders of the three middle segments.
const ORDERS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

#[derive(Clone, Debug, PartialEq)]
pub struct AssembledSequence {
    pub ids: Vec<usize>,
    pub sources: Vec<EmbedSource>,
    /// `true` where the token is a scored next-token target.
    pub loss_mask: Vec<bool>,
    pub order: [SegmentKind; 3],
    pub segment_ranges: [Range<usize>; 3],
    /// Positions to be generated (inference modes only).
    pub target: Option<Range<usize>>,
    pub geometry: Geometry,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn cls_position(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<Range<usize>> {
        self.order
            .iter()
            .position(|&k| k == kind)
            .map(|i| self.segment_ranges[i].clone())
    }

    /// Index of the order in the fixed list of six permutations.
    pub fn permutation_index(&self) -> usize {
        let rank = |k: SegmentKind| match k {
            SegmentKind::CurrentReport => 0,
            SegmentKind::CurrentImage => 1,
            SegmentKind::PreviousImage | SegmentKind::PreviousPad => 2,
        };
        let key = [rank(self.order[0]), rank(self.order[1]), rank(self.order[2])];
        ORDERS.iter().position(|o| *o == key).expect("order is a permutation")
    }
}

/// Builds the segments for one study.
///
/// `report` holds word ids (`< vocab.words`), the image slices hold codebook
/// indices. In the inference modes the segment to be generated must be
/// absent; it is laid out last as `START` followed by `PAD` placeholders
/// that the decoder overwrites.
#[allow(clippy::too_many_arguments)]
pub fn assemble(
    vocab: &Vocab,
    geometry: Geometry,
    report: Option<&[usize]>,
    current_image: Option<&[usize]>,
    previous_image: Option<&[usize]>,
    delta_days: Option<f64>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<AssembledSequence> {
    let side = geometry.grid_side()?;
    if previous_image.is_some() != delta_days.is_some() {
        return Err(invalid("an interval is given exactly when a prior image is"));
    }
    let bucket = bucketize_delta(delta_days)?;
    let pad = vocab.special(Special::Pad);

    let check_image = |img: &[usize], what: &str| -> Result<()> {
        if img.len() != geometry.n_x {
            return Err(invalid(format!(
                "{what} has {} tokens, expected {}",
                img.len(),
                geometry.n_x
            )));
        }
        if let Some(&bad) = img.iter().find(|&&t| t >= vocab.image_codes) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                limit: vocab.image_codes,
            });
        }
        Ok(())
    };

    let report_seg = match (mode, report) {
        (Mode::InferReport, Some(_)) => {
            return Err(invalid("report generation was asked for but a report was supplied"))
        }
        (Mode::InferReport, None) => {
            let mut ids = vec![vocab.special(Special::ReportStart)];
            ids.resize(geometry.n_r + 2, pad);
            ids
        }
        (_, None) => return Err(invalid("a report is required in this mode")),
        (_, Some(words)) => {
            if words.len() > geometry.n_r {
                return Err(invalid(format!(
                    "report has {} words, slot holds {}",
                    words.len(),
                    geometry.n_r
                )));
            }
            if let Some(&bad) = words.iter().find(|&&w| w >= vocab.words) {
                return Err(Error::TokenOutOfRange {
                    id: bad,
                    limit: vocab.words,
                });
            }
            let mut ids = vec![vocab.special(Special::ReportStart)];
            ids.extend(words.iter().map(|&w| vocab.word(w)));
            ids.push(vocab.special(Special::ReportStop));
            ids.resize(geometry.n_r + 2, pad);
            ids
        }
    };

    let image_seg = |img: &[usize], start: Special, stop: Special| {
        let mut ids = vec![vocab.special(start)];
        ids.extend(img.iter().map(|&t| vocab.image(t)));
        ids.push(vocab.special(stop));
        ids
    };

    let current_seg = match (mode, current_image) {
        (Mode::InferImage, Some(_)) => {
            return Err(invalid("image generation was asked for but a current image was supplied"))
        }
        (Mode::InferImage, None) => {
            let mut ids = vec![vocab.special(Special::CurrentStart)];
            ids.resize(geometry.n_x + 2, pad);
            ids
        }
        (_, None) => return Err(invalid("a current image is required in this mode")),
        (_, Some(img)) => {
            check_image(img, "current image")?;
            image_seg(img, Special::CurrentStart, Special::CurrentStop)
        }
    };

    let previous_seg = match previous_image {
        Some(img) => {
            check_image(img, "previous image")?;
            ModalitySegment {
                kind: SegmentKind::PreviousImage,
                ids: image_seg(img, Special::PreviousStart, Special::PreviousStop),
                scheme: PosScheme::AxialImage,
            }
        }
        None => {
            let mut ids = vec![vocab.special(Special::PreviousStart)];
            ids.extend(std::iter::repeat(pad).take(geometry.n_x));
            ids.push(vocab.special(Special::PreviousStop));
            ModalitySegment {
                kind: SegmentKind::PreviousPad,
                ids,
                scheme: PosScheme::LearnedPad,
            }
        }
    };

    let segments = [
        ModalitySegment {
            kind: SegmentKind::CurrentReport,
            ids: report_seg,
            scheme: PosScheme::SinusoidalText,
        },
        ModalitySegment {
            kind: SegmentKind::CurrentImage,
            ids: current_seg,
            scheme: PosScheme::AxialImage,
        },
        previous_seg,
    ];

    let order = match mode {
        Mode::Train => ORDERS[rng.gen_range(0..ORDERS.len())],
        Mode::InferReport => [2, 1, 0],
        Mode::InferImage => [2, 0, 1],
    };

    let total = geometry.total_len();
    let mut ids = Vec::with_capacity(total);
    let mut sources = Vec::with_capacity(total);
    let mut loss_mask = Vec::with_capacity(total);
    ids.push(vocab.temporal(bucket));
    sources.push(EmbedSource::Temporal);
    loss_mask.push(false);

    let mut ranges: [Range<usize>; 3] = [0..0, 0..0, 0..0];
    let mut kinds = [SegmentKind::CurrentReport; 3];
    let mut target = None;
    for (slot, &si) in order.iter().enumerate() {
        let seg = &segments[si];
        let start = ids.len();
        let generated = matches!(
            (mode, seg.kind),
            (Mode::InferReport, SegmentKind::CurrentReport) | (Mode::InferImage, SegmentKind::CurrentImage)
        );
        for (i, &id) in seg.ids.iter().enumerate() {
            let last = i + 1 == seg.ids.len();
            let source = match seg.scheme {
                PosScheme::SinusoidalText => EmbedSource::Text(i),
                PosScheme::LearnedPad => EmbedSource::Pad(i),
                PosScheme::AxialImage if i == 0 || last => EmbedSource::Framing,
                PosScheme::AxialImage => EmbedSource::Image {
                    row: (i - 1) / side,
                    col: (i - 1) % side,
                    previous: seg.kind == SegmentKind::PreviousImage,
                },
            };
            let scored = match seg.kind {
                SegmentKind::PreviousPad => false,
                _ => id != pad || generated,
            };
            ids.push(id);
            sources.push(source);
            loss_mask.push(scored);
        }
        if generated {
            target = Some(start + 1..ids.len());
        }
        ranges[slot] = start..ids.len();
        kinds[slot] = seg.kind;
    }
    ids.push(vocab.special(Special::Cls));
    sources.push(EmbedSource::Cls);
    loss_mask.push(false);
    debug_assert_eq!(ids.len(), total);

    Ok(AssembledSequence {
        ids,
        sources,
        loss_mask,
        order: kinds,
        segment_ranges: ranges,
        target,
        geometry,
    })
}

/// Standard transformer sinusoid: `sin` on even dims, `cos` on odd dims.
pub fn sinusoid(pos: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|j| {
            let freq = 10000f64.powf(-((j / 2 * 2) as f64) / d_model as f64);
            let angle = pos as f64 * freq;
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Fixed part of the positional signal: text sinusoid over the
/// intra-segment index plus a global sinusoid over absolute position.
pub fn fixed_positional(seq: &AssembledSequence, d_model: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(seq.len() * d_model);
    for (p, src) in seq.sources.iter().enumerate() {
        let mut row = sinusoid(p, d_model);
        if let EmbedSource::Text(i) = src {
            for (r, s) in row.iter_mut().zip(sinusoid(*i, d_model)) {
                *r += s;
            }
        }
        out.extend(row);
    }
    out
}

/// Learned positional tables: axial row/column embeddings for image grids
/// and one embedding per pad-segment position.
pub struct PositionalTables<'a> {
    pub axial_row: &'a Tensor,
    pub axial_col: &'a Tensor,
    pub pad: &'a Tensor,
}

/// Per-position additive embedding `[L, d_model]`: fixed sinusoids plus the
/// learned axial / pad rows selected by each position's source.
pub fn positional_embed(seq: &AssembledSequence, tables: &PositionalTables<'_>, d_model: usize) -> Result<Tensor> {
    let side = seq.geometry.grid_side()?;
    for (t, rows) in [
        (tables.axial_row, 2 * side),
        (tables.axial_col, 2 * side),
        (tables.pad, seq.geometry.n_x + 2),
    ] {
        if t.shape() != [rows, d_model] {
            return Err(Error::ShapeMismatch {
                op: "positional_embed",
                lhs: t.shape().to_vec(),
                rhs: vec![rows, d_model],
            });
        }
    }
    let axial: Vec<Option<(usize, usize)>> = seq.sources.iter().map(|s| s.axial_rows(side)).collect();
    let row_ids: Vec<Option<usize>> = axial.iter().map(|a| a.map(|(r, _)| r)).collect();
    let col_ids: Vec<Option<usize>> = axial.iter().map(|a| a.map(|(_, c)| c)).collect();
    let pad_ids: Vec<Option<usize>> = seq
        .sources
        .iter()
        .map(|s| match s {
            EmbedSource::Pad(i) => Some(*i),
            _ => None,
        })
        .collect();
    let fixed = Tensor::new(fixed_positional(seq, d_model), &[seq.len(), d_model]);
    fixed
        .add(&tables.axial_row.gather_rows(&row_ids)?)?
        .add(&tables.axial_col.gather_rows(&col_ids)?)?
        .add(&tables.pad.gather_rows(&pad_ids)?)
}
