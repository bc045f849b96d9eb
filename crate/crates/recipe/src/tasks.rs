//! Synthetic downstream QA suites derived from event scripts.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tempora_core::data::{CorpusSpec, VideoClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Suite {
    /// Before/after, first and last questions on short clips.
    OrderCritical,
    /// Frame-range recall and event counts on short clips.
    ShortClips,
    /// First-event recall on 64-frame clips that open with a short event.
    LongClips,
}

impl Suite {
    pub fn corpus_spec(self, num_clips: usize) -> CorpusSpec {
        match self {
            Suite::OrderCritical | Suite::ShortClips => CorpusSpec {
                num_clips,
                min_frames: 8,
                max_frames: 12,
                min_events: 2,
                max_events: 4,
                fps: 1.0,
                first_event_max_frames: None,
            },
            Suite::LongClips => CorpusSpec {
                num_clips,
                min_frames: 64,
                max_frames: 64,
                min_events: 3,
                max_events: 5,
                fps: 1.0,
                first_event_max_frames: Some(3),
            },
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::OrderCritical => "order_critical",
            Suite::ShortClips => "short_clips",
            Suite::LongClips => "long_clips",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaKind {
    Before,
    First,
    Last,
    Recall,
    Count,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    /// Index of the clip in its corpus.
    pub clip: usize,
    pub kind: QaKind,
    pub question: String,
    pub answer: String,
}

pub fn before_question(a: &str, b: &str) -> String {
    format!("Does {a} happen before {b}?")
}

pub fn recall_question(start: usize, end: usize) -> String {
    format!("What happens from frame {start} to frame {end}?")
}

pub const FIRST_QUESTION: &str = "What happens first in the video?";
pub const LAST_QUESTION: &str = "What happens last in the video?";
pub const COUNT_QUESTION: &str = "How many events happen in the video?";

fn item(clip: usize, kind: QaKind, question: String, answer: String) -> QaItem {
    QaItem {
        clip,
        kind,
        question,
        answer,
    }
}

/// Questions about one clip. Every answer is read off the event list.
pub fn clip_questions<R: Rng + ?Sized>(suite: Suite, index: usize, clip: &VideoClip, rng: &mut R) -> Vec<QaItem> {
    let ev = &clip.events;
    let mut out = Vec::new();
    match suite {
        Suite::OrderCritical => {
            if ev.len() >= 2 {
                // One yes and one no per clip, in random order.
                let first_yes = rng.random_bool(0.5);
                for k in 0..2 {
                    let mut pair: Vec<usize> = rand::seq::index::sample(rng, ev.len(), 2).into_vec();
                    pair.sort_unstable();
                    let yes = first_yes != (k == 1);
                    let (a, b) = if yes { (pair[0], pair[1]) } else { (pair[1], pair[0]) };
                    out.push(item(
                        index,
                        QaKind::Before,
                        before_question(&ev[a].caption, &ev[b].caption),
                        if a < b { "yes" } else { "no" }.to_string(),
                    ));
                }
            }
            out.push(item(index, QaKind::First, FIRST_QUESTION.into(), ev[0].caption.clone()));
            out.push(item(index, QaKind::Last, LAST_QUESTION.into(), ev[ev.len() - 1].caption.clone()));
        }
        Suite::ShortClips => {
            let e = &ev[rng.random_range(0..ev.len())];
            out.push(item(index, QaKind::Recall, recall_question(e.start, e.end), e.caption.clone()));
            out.push(item(index, QaKind::Count, COUNT_QUESTION.into(), ev.len().to_string()));
        }
        Suite::LongClips => {
            out.push(item(index, QaKind::First, FIRST_QUESTION.into(), ev[0].caption.clone()));
        }
    }
    out
}

/// QA items for every clip, shuffled deterministically by `seed`.
pub fn build_suite(suite: Suite, clips: &[VideoClip], seed: u64) -> Vec<QaItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items: Vec<QaItem> = clips
        .iter()
        .enumerate()
        .flat_map(|(i, c)| clip_questions(suite, i, c, &mut rng))
        .collect();
    items.shuffle(&mut rng);
    items
}

/// Every question and answer string the suites can produce for `captions`.
pub fn vocabulary_texts(captions: &[String]) -> Vec<String> {
    let mut out = vec![
        FIRST_QUESTION.to_string(),
        LAST_QUESTION.to_string(),
        COUNT_QUESTION.to_string(),
        recall_question(1, 2),
        "yes".into(),
        "no".into(),
    ];
    for a in captions {
        for b in captions {
            out.push(before_question(a, b));
        }
    }
    out
}
