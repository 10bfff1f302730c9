use crate::imaging::{BBox, Frame};

/// An isolated gesture: ordered frames plus annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct GestureSequence {
    pub id: String,
    pub frames: Vec<Frame>,
    /// Index into the dataset's class list.
    pub label: usize,
    pub subject: String,
    /// Face region to blank before skin detection, when annotated.
    pub face_bbox: Option<BBox>,
}

impl GestureSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
