//! Labelled collections of frame sequences split by class into train/val/test.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::warn;

use crate::attention::FrameSequence;
use crate::error::{CltaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = CltaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CltaError::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

/// One video with its string label and split.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub seq: FrameSequence,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Sequences of one split with dense label ids (lexicographic order of the names).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub sequences: Vec<FrameSequence>,
    pub class_names: Vec<String>,
}

impl LabeledSet {
    pub fn labels(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.label.expect("labelled set")).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Drops sequences longer than `z`, warning once per dropped video.
    pub fn retain_max_len(&mut self, z: usize) {
        self.sequences.retain(|s| {
            let ok = s.len() <= z;
            if !ok {
                warn!("skipping video `{}`: {} frames exceeds Z = {z}", s.video_id, s.len());
            }
            ok
        });
    }
}

impl Dataset {
    /// Checks the split discipline: unique ids, consistent dimensions and no label in two splits.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
        let dim = self.samples.first().map(|s| s.seq.dim());
        for s in &self.samples {
            if !ids.insert(s.seq.video_id.as_str()) {
                return Err(CltaError::Manifest(format!("duplicate video id `{}`", s.seq.video_id)));
            }
            if Some(s.seq.dim()) != dim {
                return Err(CltaError::Manifest(format!(
                    "video `{}` has feature dimension {}, expected {}",
                    s.seq.video_id,
                    s.seq.dim(),
                    dim.unwrap_or(0)
                )));
            }
            match owner.get(s.label.as_str()) {
                Some(&prev) if prev != s.split => {
                    return Err(CltaError::Manifest(format!(
                        "label `{}` appears in both {prev} and {} splits",
                        s.label, s.split
                    )));
                }
                _ => {
                    owner.insert(&s.label, s.split);
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.seq.dim())
    }

    /// Longest sequence over every split.
    pub fn max_len(&self) -> usize {
        self.samples.iter().map(|s| s.seq.len()).max().unwrap_or(0)
    }

    /// Sequences of `split` with labels mapped in lexicographic order.
    pub fn split(&self, split: Split) -> LabeledSet {
        let names: BTreeSet<&str> = self
            .samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.label.as_str())
            .collect();
        let class_names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        self.split_with_labels(split, &class_names)
            .expect("every label of the split is in its own class list")
    }

    /// Sequences of `split` with labels mapped through a fixed class list.
    pub fn split_with_labels(&self, split: Split, class_names: &[String]) -> Result<LabeledSet> {
        let index: BTreeMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut sequences = Vec::new();
        for s in self.samples.iter().filter(|s| s.split == split) {
            let id = *index
                .get(s.label.as_str())
                .ok_or_else(|| CltaError::Manifest(format!("label `{}` not in the class list", s.label)))?;
            let mut seq = s.seq.clone();
            seq.label = Some(id);
            sequences.push(seq);
        }
        Ok(LabeledSet {
            sequences,
            class_names: class_names.to_vec(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitSummary {
    pub classes: usize,
    pub videos: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub splits: BTreeMap<Split, SplitSummary>,
    /// Sequence length -> number of videos.
    pub length_histogram: BTreeMap<usize, usize>,
    pub z: usize,
    pub total_videos: usize,
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (split, s) in &self.splits {
            writeln!(f, "{split}: {} classes, {} videos", s.classes, s.videos)?;
        }
        let min = self.length_histogram.keys().next().copied().unwrap_or(0);
        write!(f, "lengths {min}..={}, Z = {}", self.z, self.z)
    }
}

pub fn describe(dataset: &Dataset) -> DatasetSummary {
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let in_split: Vec<&Sample> = dataset.samples.iter().filter(|s| s.split == split).collect();
        let classes: BTreeSet<&str> = in_split.iter().map(|s| s.label.as_str()).collect();
        if in_split.is_empty() {
            warn!("split `{split}` is empty");
        }
        splits.insert(
            split,
            SplitSummary {
                classes: classes.len(),
                videos: in_split.len(),
            },
        );
    }
    let mut length_histogram = BTreeMap::new();
    for s in &dataset.samples {
        *length_histogram.entry(s.seq.len()).or_insert(0) += 1;
    }
    DatasetSummary {
        splits,
        length_histogram,
        z: dataset.max_len(),
        total_videos: dataset.samples.len(),
    }
}
