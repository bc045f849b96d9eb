//! Procedural video-text corpus and the four temporal training-sample builders.
//!
//! Frame indices in prompts and in [`Event`] spans are 1-based; tensor rows
//! are 0-based.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CAPTIONS: [&str; 12] = [
    "a dog runs",
    "a man jumps",
    "a car turns",
    "a bird flies",
    "a woman sings",
    "a boy swims",
    "a cat sleeps",
    "a girl dances",
    "a horse walks",
    "a baby cries",
    "a chef cooks",
    "a team plays",
];

/// How frames are rendered from an event script.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub patches: usize,
    pub visual_dim: usize,
    /// Std of the per-frame shared offset.
    pub jitter: f64,
    /// Std of i.i.d. per-element noise.
    pub noise: f64,
    pub signature_seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            patches: 4,
            visual_dim: 16,
            jitter: 0.15,
            noise: 0.15,
            signature_seed: 0x5eed,
        }
    }
}

/// Event types with a fixed visual signature each.
#[derive(Clone, Debug, PartialEq)]
pub struct EventVocab {
    captions: Vec<String>,
    signatures: Vec<Tensor<f32>>,
    pub render: RenderConfig,
}

impl EventVocab {
    pub fn new(captions: Vec<String>, render: RenderConfig) -> Result<Self> {
        if captions.len() < 8 {
            return Err(Error::Data(format!(
                "need at least 8 event types, got {}",
                captions.len()
            )));
        }
        let mut sorted = captions.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != captions.len() {
            return Err(Error::Data("event captions must be distinct".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(render.signature_seed);
        let signatures = captions
            .iter()
            .map(|_| Tensor::randn(&[render.patches, render.visual_dim], 1.0, &mut rng))
            .collect();
        Ok(Self {
            captions,
            signatures,
            render,
        })
    }

    pub fn default_vocab() -> Self {
        Self::new(
            DEFAULT_CAPTIONS.iter().map(|s| s.to_string()).collect(),
            RenderConfig::default(),
        )
        .expect("default vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn caption(&self, kind: usize) -> &str {
        &self.captions[kind]
    }

    pub fn captions(&self) -> &[String] {
        &self.captions
    }

    pub fn kind_of(&self, caption: &str) -> Option<usize> {
        self.captions.iter().position(|c| c == caption)
    }

    pub fn signature(&self, kind: usize) -> &Tensor<f32> {
        &self.signatures[kind]
    }

    /// Renders `[F, P, d_v]` features for events given as `(start, end, kind)`.
    pub fn render_frames(&self, num_frames: usize, events: &[(usize, usize, usize)], seed: u64) -> Tensor<f32> {
        let RenderConfig {
            patches: p,
            visual_dim: d,
            jitter,
            noise,
            ..
        } = self.render;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0f32; num_frames * p * d];
        for &(start, end, kind) in events {
            let sig = self.signatures[kind].data();
            for frame in start..=end {
                let offset = Tensor::<f32>::randn(&[d], jitter, &mut rng);
                let eps = Tensor::<f32>::randn(&[p * d], noise, &mut rng);
                let base = (frame - 1) * p * d;
                for i in 0..p * d {
                    data[base + i] = sig[i] + offset.data()[i % d] + eps.data()[i];
                }
            }
        }
        Tensor::new(&[num_frames, p, d], data).expect("frames")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub start: usize,
    pub end: usize,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    /// `[F, P, d_v]`.
    pub frames: Tensor<f32>,
    pub events: Vec<Event>,
    pub fps: f64,
    pub global_caption: String,
    pub feature_seed: u64,
}

impl VideoClip {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Checks span bounds, ordering and non-overlap.
    pub fn validate(&self) -> Result<()> {
        let f = self.num_frames();
        let mut prev_end = 0;
        for e in &self.events {
            if e.start < 1 || e.start > e.end || e.end > f {
                return Err(Error::Data(format!(
                    "clip {}: span {}..{} outside 1..={f}",
                    self.clip_id, e.start, e.end
                )));
            }
            if e.start <= prev_end {
                return Err(Error::Data(format!(
                    "clip {}: events overlap or are out of order at frame {}",
                    self.clip_id, e.start
                )));
            }
            prev_end = e.end;
        }
        Ok(())
    }

    /// True if the events cover frames `1..=F` without gaps.
    pub fn events_partition_frames(&self) -> bool {
        let mut next = 1;
        for e in &self.events {
            if e.start != next {
                return false;
            }
            next = e.end + 1;
        }
        next == self.num_frames() + 1
    }
}

/// Joins event captions in order into a clip-level caption.
pub fn global_caption(captions: &[&str]) -> String {
    format!("{}.", captions.join(", then "))
}

/// Parameters of a generated corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub num_clips: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub fps: f64,
    /// Caps the length of the first event (short opening events).
    #[serde(default)]
    pub first_event_max_frames: Option<usize>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_clips: 64,
            min_frames: 8,
            max_frames: 16,
            min_events: 2,
            max_events: 4,
            fps: 1.0,
            first_event_max_frames: None,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self, vocab: &EventVocab) -> Result<()> {
        let bad = |m: String| Err(Error::Data(m));
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!("frame range {}..={}", self.min_frames, self.max_frames));
        }
        if self.min_events == 0 || self.min_events > self.max_events {
            return bad(format!("event range {}..={}", self.min_events, self.max_events));
        }
        if self.max_events > vocab.len() {
            return bad(format!("{} events per clip but only {} event types", self.max_events, vocab.len()));
        }
        if self.min_events > self.min_frames {
            return bad("min_events exceeds min_frames".into());
        }
        if let Some(m) = self.first_event_max_frames {
            if m == 0 || m + self.max_events - 1 > self.min_frames {
                return bad(format!("first_event_max_frames {m} does not fit the shortest clip"));
            }
        }
        if !(self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        Ok(())
    }
}

fn clip_from_script(
    vocab: &EventVocab,
    clip_id: String,
    num_frames: usize,
    script: &[(usize, usize, usize)],
    fps: f64,
    feature_seed: u64,
) -> VideoClip {
    let events = script
        .iter()
        .map(|&(start, end, kind)| Event {
            start,
            end,
            caption: vocab.caption(kind).to_string(),
        })
        .collect::<Vec<_>>();
    let caps: Vec<&str> = events.iter().map(|e| e.caption.as_str()).collect();
    VideoClip {
        clip_id,
        frames: vocab.render_frames(num_frames, script, feature_seed),
        global_caption: global_caption(&caps),
        events,
        fps,
        feature_seed,
    }
}

/// Generates `spec.num_clips` clips; a pure function of `seed`.
///
/// Each clip uses distinct event types whose spans partition its frames.
pub fn generate_corpus(seed: u64, spec: &CorpusSpec, vocab: &EventVocab) -> Result<Vec<VideoClip>> {
    spec.validate(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips = Vec::with_capacity(spec.num_clips);
    for i in 0..spec.num_clips {
        let f = rng.random_range(spec.min_frames..=spec.max_frames);
        let n = rng.random_range(spec.min_events..=spec.max_events.min(f));
        let kinds = rand::seq::index::sample(&mut rng, vocab.len(), n).into_vec();
        // n - 1 distinct cut points among the F - 1 gaps between frames;
        // cut c ends an event at frame c + 1.
        let mut cuts = match spec.first_event_max_frames {
            Some(m) if n >= 2 => {
                let first = rng.random_range(1..=m);
                let mut c: Vec<usize> = rand::seq::index::sample(&mut rng, f - 1 - first, n - 2)
                    .into_iter()
                    .map(|x| x + first)
                    .collect();
                c.push(first - 1);
                c
            }
            _ => rand::seq::index::sample(&mut rng, f - 1, n - 1).into_vec(),
        };
        cuts.sort_unstable();
        let mut script = Vec::with_capacity(n);
        let mut start = 1;
        for (k, &kind) in kinds.iter().enumerate() {
            let end = if k + 1 < n { cuts[k] + 1 } else { f };
            script.push((start, end, kind));
            start = end + 1;
        }
        let feature_seed = rng.random::<u64>();
        clips.push(clip_from_script(vocab, format!("clip{seed:x}-{i:05}"), f, &script, spec.fps, feature_seed));
    }
    Ok(clips)
}

/// Converts a time span in seconds to 1-based inclusive frame indices.
pub fn timestamps_to_frames(start_s: f64, end_s: f64, fps: f64, num_frames: usize) -> Result<(usize, usize)> {
    if !(start_s >= 0.0) || !(end_s >= start_s) {
        return Err(Error::Data(format!("invalid time span {start_s}..{end_s}")));
    }
    let start = (start_s * fps).floor() as usize + 1;
    let end = ((end_s * fps).floor() as usize + 1).min(num_frames);
    Ok((start.min(end), end))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "VC")]
    Vc,
    #[serde(rename = "MC")]
    Mc,
    #[serde(rename = "MG")]
    Mg,
    #[serde(rename = "DC")]
    Dc,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Vc, Scheme::Mc, Scheme::Mg, Scheme::Dc];

    pub fn needs_event(self) -> bool {
        matches!(self, Scheme::Mc | Scheme::Mg)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Vc => "VC",
            Scheme::Mc => "MC",
            Scheme::Mg => "MG",
            Scheme::Dc => "DC",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "VC" => Ok(Scheme::Vc),
            "MC" => Ok(Scheme::Mc),
            "MG" => Ok(Scheme::Mg),
            "DC" => Ok(Scheme::Dc),
            other => Err(Error::Config(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub clip_id: String,
    pub scheme: Scheme,
    pub prompt: String,
    pub target: String,
}

pub const VC_PROMPT: &str = "What does the video describe?";
pub const DC_PROMPT: &str = "Can you give me a breakdown of the occurrences at different timestamps in the video?";

pub fn moment_caption_prompt(start: usize, end: usize) -> String {
    format!("Explain what happened from frame {start} to frame {end} in the video.")
}

pub fn moment_grounding_prompt(caption: &str) -> String {
    format!("During which frames in the video can we observe ''{caption}``?")
}

pub fn grounding_target(start: usize, end: usize) -> String {
    format!("from frame {start} to frame {end}")
}

/// Inverse of [`grounding_target`].
pub fn parse_grounding(target: &str) -> Option<(usize, usize)> {
    let rest = target.strip_prefix("from frame ")?;
    let (s, e) = rest.split_once(" to frame ")?;
    let digits = |x: &str| !x.is_empty() && x.bytes().all(|b| b.is_ascii_digit());
    if !digits(s) || !digits(e) {
        return None;
    }
    Some((s.parse().ok()?, e.parse().ok()?))
}

fn sentence(caption: &str) -> String {
    if caption.ends_with('.') {
        caption.to_string()
    } else {
        format!("{caption}.")
    }
}

pub fn dense_caption_target(events: &[Event]) -> String {
    events
        .iter()
        .map(|e| format!("{}, from {} to {}.", e.caption, e.start, e.end))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Formats one temporal training sample. MC and MG need `event_index`.
pub fn build_sample(clip: &VideoClip, scheme: Scheme, event_index: Option<usize>) -> Result<TrainingSample> {
    let event = match (scheme.needs_event(), event_index) {
        (true, None) => {
            return Err(Error::Data(format!("{scheme} samples need an event index")));
        }
        (true, Some(i)) => Some(clip.events.get(i).ok_or_else(|| {
            Error::Data(format!("clip {} has no event {i}", clip.clip_id))
        })?),
        (false, _) => None,
    };
    let (prompt, target) = match (scheme, event) {
        (Scheme::Vc, _) => (VC_PROMPT.to_string(), clip.global_caption.clone()),
        (Scheme::Mc, Some(e)) => (moment_caption_prompt(e.start, e.end), sentence(&e.caption)),
        (Scheme::Mg, Some(e)) => (moment_grounding_prompt(&e.caption), grounding_target(e.start, e.end)),
        (Scheme::Dc, _) => (DC_PROMPT.to_string(), dense_caption_target(&clip.events)),
        _ => unreachable!("event presence checked above"),
    };
    Ok(TrainingSample {
        clip_id: clip.clip_id.clone(),
        scheme,
        prompt,
        target,
    })
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub fps: f64,
    #[serde(rename = "F")]
    pub num_frames: usize,
    pub events: Vec<Event>,
    pub global_caption: String,
    pub feature_seed: u64,
}

impl ClipRecord {
    pub fn from_clip(clip: &VideoClip) -> Self {
        Self {
            clip_id: clip.clip_id.clone(),
            fps: clip.fps,
            num_frames: clip.num_frames(),
            events: clip.events.clone(),
            global_caption: clip.global_caption.clone(),
            feature_seed: clip.feature_seed,
        }
    }

    /// Re-renders features from the seed.
    pub fn into_clip(self, vocab: &EventVocab) -> Result<VideoClip> {
        if self.num_frames == 0 {
            return Err(Error::Data("clip with zero frames".into()));
        }
        let mut script = Vec::with_capacity(self.events.len());
        for e in &self.events {
            let kind = vocab
                .kind_of(&e.caption)
                .ok_or_else(|| Error::Data(format!("unknown event caption `{}`", e.caption)))?;
            if e.start < 1 || e.end < e.start || e.end > self.num_frames {
                return Err(Error::Data(format!("span {}..{} outside the clip", e.start, e.end)));
            }
            script.push((e.start, e.end, kind));
        }
        let clip = VideoClip {
            frames: vocab.render_frames(self.num_frames, &script, self.feature_seed),
            clip_id: self.clip_id,
            events: self.events,
            fps: self.fps,
            global_caption: self.global_caption,
            feature_seed: self.feature_seed,
        };
        clip.validate()?;
        Ok(clip)
    }
}

pub fn write_corpus(path: impl AsRef<Path>, clips: &[VideoClip]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for clip in clips {
        let line = serde_json::to_string(&ClipRecord::from_clip(clip))
            .map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>, vocab: &EventVocab) -> Result<Vec<VideoClip>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut clips = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let record: ClipRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        clips.push(record.into_clip(vocab).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_clip() -> VideoClip {
        let events = vec![
            Event {
                start: 1,
                end: 4,
                caption: "woman in long white dress walking up a hillside path".into(),
            },
            Event {
                start: 5,
                end: 8,
                caption: "a woman sitting on the beach with long hair".into(),
            },
        ];
        VideoClip {
            clip_id: "example".into(),
            frames: Tensor::zeros(&[8, 1, 1]),
            global_caption: "a woman walks then sits.".into(),
            events,
            fps: 1.0,
            feature_seed: 0,
        }
    }

    #[test]
    fn moment_captioning_template() {
        let s = build_sample(&reference_clip(), Scheme::Mc, Some(0)).unwrap();
        assert_eq!(s.prompt, "Explain what happened from frame 1 to frame 4 in the video.");
        assert_eq!(s.target, "woman in long white dress walking up a hillside path.");
    }

    #[test]
    fn moment_grounding_template() {
        let s = build_sample(&reference_clip(), Scheme::Mg, Some(0)).unwrap();
        assert_eq!(
            s.prompt,
            "During which frames in the video can we observe ''woman in long white dress walking up a hillside path``?"
        );
        assert_eq!(s.target, "from frame 1 to frame 4");
        assert_eq!(parse_grounding(&s.target), Some((1, 4)));
    }

    #[test]
    fn dense_captioning_template() {
        let s = build_sample(&reference_clip(), Scheme::Dc, None).unwrap();
        assert_eq!(s.prompt, DC_PROMPT);
        assert_eq!(
            s.target,
            "woman in long white dress walking up a hillside path, from 1 to 4. a woman sitting on the beach with long hair, from 5 to 8."
        );
    }

    #[test]
    fn video_captioning_template() {
        let s = build_sample(&reference_clip(), Scheme::Vc, None).unwrap();
        assert_eq!(s.prompt, "What does the video describe?");
        assert_eq!(s.target, "a woman walks then sits.");
    }

    #[test]
    fn event_index_is_required() {
        assert!(build_sample(&reference_clip(), Scheme::Mc, None).is_err());
        assert!(build_sample(&reference_clip(), Scheme::Mg, Some(7)).is_err());
    }

    #[test]
    fn timestamp_conversion() {
        assert_eq!(timestamps_to_frames(0.0, 3.0, 1.0, 10).unwrap(), (1, 4));
        assert_eq!(timestamps_to_frames(0.0, 0.0, 4.0, 10).unwrap(), (1, 1));
        assert_eq!(timestamps_to_frames(5.0, 99.0, 2.0, 20).unwrap(), (11, 20));
        assert!(timestamps_to_frames(2.0, 1.0, 1.0, 10).is_err());
    }

    #[test]
    fn grounding_parser_rejects_garbage() {
        assert_eq!(parse_grounding("from frame 12 to frame 30"), Some((12, 30)));
        assert_eq!(parse_grounding("from frame  to frame 3"), None);
        assert_eq!(parse_grounding("from 1 to 4"), None);
    }

    #[test]
    fn empty_corpus() {
        let vocab = EventVocab::default_vocab();
        let spec = CorpusSpec {
            num_clips: 0,
            ..Default::default()
        };
        assert!(generate_corpus(1, &spec, &vocab).unwrap().is_empty());
    }

    #[test]
    fn vocab_needs_eight_kinds() {
        let caps = DEFAULT_CAPTIONS[..7].iter().map(|s| s.to_string()).collect();
        assert!(EventVocab::new(caps, RenderConfig::default()).is_err());
    }
}
