//! Query and candidate payloads: text, images, or an interleaving of both.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContentError {
    #[error("content has no parts")]
    Empty,
    #[error("text part {0} is empty")]
    EmptyText(usize),
    #[error("image part {0} has an empty reference")]
    EmptyImageRef(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Text(String),
    /// A URL, a `data:` URI, or a local file path.
    ImageRef(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Part>", into = "Vec<Part>")]
pub struct MultimodalContent {
    parts: Vec<Part>,
}

impl MultimodalContent {
    pub fn new(parts: Vec<Part>) -> Result<Self, ContentError> {
        if parts.is_empty() {
            return Err(ContentError::Empty);
        }
        for (i, p) in parts.iter().enumerate() {
            match p {
                Part::Text(t) if t.is_empty() => return Err(ContentError::EmptyText(i)),
                Part::ImageRef(r) if r.is_empty() => return Err(ContentError::EmptyImageRef(i)),
                _ => {}
            }
        }
        Ok(Self { parts })
    }

    pub fn text(text: impl Into<String>) -> Result<Self, ContentError> {
        Self::new(vec![Part::Text(text.into())])
    }

    pub fn image(reference: impl Into<String>) -> Result<Self, ContentError> {
        Self::new(vec![Part::ImageRef(reference.into())])
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    pub fn image_count(&self) -> usize {
        self.parts.iter().filter(|p| matches!(p, Part::ImageRef(_))).count()
    }

    /// Concatenated text parts, with images shown as `<image>`.
    pub fn display_text(&self) -> String {
        self.parts
            .iter()
            .map(|p| match p {
                Part::Text(t) => t.as_str(),
                Part::ImageRef(_) => "<image>",
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<Part>> for MultimodalContent {
    type Error = ContentError;

    fn try_from(parts: Vec<Part>) -> Result<Self, Self::Error> {
        Self::new(parts)
    }
}

impl From<MultimodalContent> for Vec<Part> {
    fn from(c: MultimodalContent) -> Self {
        c.parts
    }
}

/// Accumulates parts, merging adjacent text runs into one part.
#[derive(Debug, Default)]
pub(crate) struct PartBuilder {
    parts: Vec<Part>,
}

impl PartBuilder {
    pub(crate) fn push_text(&mut self, s: &str) {
        if s.is_empty() {
            return;
        }
        if let Some(Part::Text(last)) = self.parts.last_mut() {
            last.push_str(s);
        } else {
            self.parts.push(Part::Text(s.to_owned()));
        }
    }

    pub(crate) fn push_content(&mut self, c: &MultimodalContent) {
        for p in c.parts() {
            match p {
                Part::Text(t) => self.push_text(t),
                Part::ImageRef(_) => self.parts.push(p.clone()),
            }
        }
    }

    pub(crate) fn finish(self) -> Result<MultimodalContent, ContentError> {
        MultimodalContent::new(self.parts)
    }
}
