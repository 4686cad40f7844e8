use serde::{Deserialize, Serialize};

use super::{Dialogue, Frame, LabelInventory};
use crate::error::{Error, Result};

/// Tag id: `0` is `O`, `1 + 2r` is `B-r`, `2 + 2r` is `I-r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tag(usize);

impl Tag {
    pub const O: Tag = Tag(0);

    pub fn begin(role: usize) -> Tag {
        Tag(1 + 2 * role)
    }

    pub fn inside(role: usize) -> Tag {
        Tag(2 + 2 * role)
    }

    pub fn from_id(id: usize) -> Tag {
        Tag(id)
    }

    pub fn id(self) -> usize {
        self.0
    }

    pub fn role(self) -> Option<usize> {
        (self.0 > 0).then(|| (self.0 - 1) / 2)
    }

    pub fn is_begin(self) -> bool {
        self.0 > 0 && self.0 % 2 == 1
    }

    pub fn is_inside(self) -> bool {
        self.0 > 0 && self.0.is_multiple_of(2)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSequence {
    pub tags: Vec<Tag>,
}

impl TagSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tags.iter().map(|t| t.id()).collect()
    }
}

/// Labeled span over flat word positions; `end` is inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabeledSpan {
    pub start: usize,
    pub end: usize,
    pub role: usize,
}

/// BIO-encodes spans over a sequence of `len` words.
pub fn encode_spans(len: usize, spans: &[LabeledSpan]) -> Result<TagSequence> {
    let mut tags = vec![Tag::O; len];
    let mut taken = vec![false; len];
    for s in spans {
        if s.start > s.end || s.end >= len {
            return Err(Error::InvalidArgument(format!(
                "span [{}, {}] outside a sequence of {len} words",
                s.start, s.end
            )));
        }
        for i in s.start..=s.end {
            if taken[i] {
                return Err(Error::OverlappingSpans(format!(
                    "position {i} covered twice (span [{}, {}])",
                    s.start, s.end
                )));
            }
            taken[i] = true;
            tags[i] = if i == s.start {
                Tag::begin(s.role)
            } else {
                Tag::inside(s.role)
            };
        }
    }
    Ok(TagSequence { tags })
}

/// Tags every word of the frame's context window. Predicate words stay `O`.
pub fn bio_encode(frame: &Frame, dialogue: &Dialogue, labels: &LabelInventory) -> Result<TagSequence> {
    let context = &dialogue.utterances[..frame.context_len()];
    let offsets = dialogue.offsets();
    let len: usize = context.iter().map(|u| u.tokens.len()).sum();
    let spans = frame
        .arguments
        .iter()
        .map(|a| {
            let role = labels
                .role_index(&a.role)
                .ok_or_else(|| Error::UnknownRole(a.role.clone()))?;
            Ok(LabeledSpan {
                start: offsets[a.span.utt] + a.span.start,
                end: offsets[a.span.utt] + a.span.end,
                role,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    encode_spans(len, &spans)
}

/// Recovers maximal spans. An `I-x` that does not continue an `x` span opens a
/// new one, so any sequence decodes.
pub fn bio_decode(tags: &[Tag]) -> Vec<LabeledSpan> {
    bio_decode_segmented(tags, &[(0, tags.len())])
}

/// Like [`bio_decode`], but spans never cross a segment boundary.
pub fn bio_decode_segmented(tags: &[Tag], segments: &[(usize, usize)]) -> Vec<LabeledSpan> {
    let mut spans = Vec::new();
    for &(lo, hi) in segments {
        let mut open: Option<(usize, usize)> = None;
        for (i, tag) in tags.iter().enumerate().take(hi).skip(lo) {
            match tag.role() {
                None => {
                    if let Some((start, role)) = open.take() {
                        spans.push(LabeledSpan { start, end: i - 1, role });
                    }
                }
                Some(r) => {
                    let continues = tag.is_inside() && matches!(open, Some((_, role)) if role == r);
                    if !continues {
                        if let Some((start, role)) = open.take() {
                            spans.push(LabeledSpan { start, end: i - 1, role });
                        }
                        open = Some((i, r));
                    }
                }
            }
        }
        if let Some((start, role)) = open {
            spans.push(LabeledSpan { start, end: hi - 1, role });
        }
    }
    spans
}
