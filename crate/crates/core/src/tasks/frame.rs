use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{one_hot, OneHot};
use crate::tensor::Tensor;

/// Ground-truth class of a frame, independent of the label a task assigns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Intrusive,
    NonIntrusive,
}

impl Polarity {
    /// Class index under the unshuffled convention (intrusive → `[1, 0]`).
    pub fn class(self) -> usize {
        match self {
            Polarity::Intrusive => 0,
            Polarity::NonIntrusive => 1,
        }
    }

    pub fn label(self, shuffled: bool) -> OneHot {
        one_hot(self.class() ^ usize::from(shuffled))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    /// `[C, H, W]`
    pub image: Tensor,
    pub label: OneHot,
    pub polarity: Polarity,
}

impl LabeledFrame {
    pub fn new(image: Tensor, polarity: Polarity, shuffled: bool) -> Self {
        LabeledFrame {
            image,
            label: polarity.label(shuffled),
            polarity,
        }
    }

    /// Whether the label is `[1, 0]`, the role the gradient analysis calls "+".
    pub fn is_first_label(&self) -> bool {
        self.label[0] == 1.0
    }
}

/// One K-shot binary task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    pub support: Vec<LabeledFrame>,
    pub query: Vec<LabeledFrame>,
    pub shuffled: bool,
    pub scene_id: u64,
}

fn count(frames: &[LabeledFrame], p: Polarity) -> usize {
    frames.iter().filter(|f| f.polarity == p).count()
}

impl TaskSet {
    /// Validates class balance and a shared image geometry.
    pub fn new(
        support: Vec<LabeledFrame>,
        query: Vec<LabeledFrame>,
        shuffled: bool,
        scene_id: u64,
    ) -> Result<Self> {
        let task = TaskSet {
            support,
            query,
            shuffled,
            scene_id,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, set) in [("support", &self.support), ("query", &self.query)] {
            let plus = count(set, Polarity::Intrusive);
            if plus * 2 != set.len() {
                return Err(Error::pre(format!(
                    "{name} set holds {plus} intrusive frames out of {}",
                    set.len()
                )));
            }
        }
        if self.support.is_empty() {
            return Err(Error::pre("support set is empty"));
        }
        let geom = self.geometry();
        if let Some(f) = self.frames().find(|f| f.image.shape() != geom) {
            return Err(Error::pre(format!(
                "frame geometry {:?} differs from {geom:?}",
                f.image.shape()
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.support.len() / 2
    }

    pub fn q(&self) -> usize {
        self.query.len() / 2
    }

    pub fn geometry(&self) -> &[usize] {
        self.support[0].image.shape()
    }

    pub fn frames(&self) -> impl Iterator<Item = &LabeledFrame> {
        self.support.iter().chain(&self.query)
    }

    /// Support images in stored order, split by polarity: `(intrusive, non_intrusive)`.
    pub fn support_by_polarity(&self) -> (Vec<&Tensor>, Vec<&Tensor>) {
        split(&self.support, |f| f.polarity == Polarity::Intrusive)
    }

    /// Support images in stored order, split by label role: `([1,0], [0,1])`.
    pub fn support_by_label(&self) -> (Vec<&Tensor>, Vec<&Tensor>) {
        split(&self.support, LabeledFrame::is_first_label)
    }

    /// The same frames with the class-to-label map flipped.
    pub fn with_labels_swapped(&self) -> TaskSet {
        let flip = |fs: &[LabeledFrame]| {
            fs.iter()
                .map(|f| LabeledFrame {
                    label: [f.label[1], f.label[0]],
                    ..f.clone()
                })
                .collect()
        };
        TaskSet {
            support: flip(&self.support),
            query: flip(&self.query),
            shuffled: !self.shuffled,
            scene_id: self.scene_id,
        }
    }

    /// Applies `f` to every image.
    pub fn map_images(&self, f: impl Fn(&Tensor) -> Tensor) -> TaskSet {
        let map = |fs: &[LabeledFrame]| {
            fs.iter()
                .map(|fr| LabeledFrame {
                    image: f(&fr.image),
                    ..fr.clone()
                })
                .collect()
        };
        TaskSet {
            support: map(&self.support),
            query: map(&self.query),
            ..self.clone()
        }
    }
}

fn split(frames: &[LabeledFrame], first: impl Fn(&LabeledFrame) -> bool) -> (Vec<&Tensor>, Vec<&Tensor>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for f in frames {
        if first(f) {
            a.push(&f.image);
        } else {
            b.push(&f.image);
        }
    }
    (a, b)
}

/// Stacks frames into a `[N, C, H, W]` batch and collects their labels.
pub fn batch(frames: &[LabeledFrame]) -> Result<(Tensor, Vec<OneHot>)> {
    let images: Vec<&Tensor> = frames.iter().map(|f| &f.image).collect();
    let x = Tensor::stack(&images)?;
    Ok((x, frames.iter().map(|f| f.label).collect()))
}
