//! Utterance manifests: segmentation from timed annotations, faulty-annotation
//! filtering, statistics, duration-targeted subsetting and train/test
//! recording de-duplication.
//!
//! Manifest files are JSON lines. The first line is a header object
//! `{"manifest": {"name": .., "split": ..}}`; every further line is one
//! [`UtteranceRecord`]. Times are seconds rounded to milliseconds.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng;
use crate::text::{Normalized, Normalizer};

pub fn round_ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub recording: String,
    pub start: f64,
    pub end: f64,
    pub text: String,
    pub normalized: String,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
}

impl UtteranceRecord {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HeaderFields {
    name: String,
    split: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    manifest: HeaderFields,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub name: String,
    pub split: String,
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn new(name: impl Into<String>, split: impl Into<String>, records: Vec<UtteranceRecord>) -> Result<Self> {
        let m = Self {
            name: name.into(),
            split: split.into(),
            records,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            if r.end <= r.start {
                return Err(Error::Format {
                    what: "manifest",
                    detail: format!("{}: end {} <= start {}", r.id, r.end, r.start),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Header {
            manifest: HeaderFields {
                name: self.name.clone(),
                split: self.split.clone(),
            },
        })
        .expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = match lines.next() {
            Some(l) => serde_json::from_str(l).map_err(|e| Error::Format {
                what: "manifest header",
                detail: e.to_string(),
            })?,
            None => {
                return Err(Error::Format {
                    what: "manifest",
                    detail: "empty file".into(),
                })
            }
        };
        let records = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<UtteranceRecord>, _>>()?;
        Self::new(header.manifest.name, header.manifest.split, records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Resolves a record's feature path relative to the manifest's directory.
pub fn feature_path(manifest_path: &Path, record: &UtteranceRecord) -> Option<PathBuf> {
    let f = record.features.as_ref()?;
    let p = Path::new(f);
    Some(if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    })
}

/// One timed annotation line of a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub start: f64,
    pub end: f64,
    pub text: String,
}

/// Parses `start<TAB>end<TAB>text` lines.
pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let bad = || Error::Format {
            what: "annotation",
            detail: format!("line {}: expected start<TAB>end<TAB>text", n + 1),
        };
        let start = parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        let end = parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        let text = parts.next().ok_or_else(bad)?.to_string();
        out.push(Annotation { start, end, text });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RemovalReason {
    NonPositiveDuration,
    OutOfBounds,
    /// Several words squeezed into less than the minimum duration.
    FaultyShort,
    EmptyTranscript,
}

/// Faulty-annotation rules. Non-positive durations are always removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentRules {
    pub min_duration: f64,
    pub min_words_for_duration_rule: usize,
    pub faulty_short: bool,
    pub out_of_bounds: bool,
    pub empty_transcript: bool,
}

impl Default for SegmentRules {
    fn default() -> Self {
        Self {
            min_duration: 0.1,
            min_words_for_duration_rule: 2,
            faulty_short: true,
            out_of_bounds: true,
            empty_transcript: true,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SegmentOutcome {
    pub records: Vec<UtteranceRecord>,
    /// `(annotation index, reason)` for every removed line.
    pub removed: Vec<(usize, RemovalReason)>,
    /// Pairs of annotation indices whose time spans overlap.
    pub overlaps: Vec<(usize, usize)>,
}

/// One record per annotation line of `recording`, minus faulty ones.
pub fn segment(
    recording: &str,
    annotations: &[Annotation],
    recording_duration: Option<f64>,
    split: &str,
    rules: &SegmentRules,
    normalizer: &Normalizer,
) -> SegmentOutcome {
    let mut out = SegmentOutcome::default();
    let mut order: Vec<usize> = (0..annotations.len())
        .filter(|&i| annotations[i].end > annotations[i].start)
        .collect();
    order.sort_by(|&a, &b| annotations[a].start.total_cmp(&annotations[b].start).then(a.cmp(&b)));
    // compare each span against the one reaching furthest so far
    let mut reach: Option<usize> = None;
    for &i in &order {
        if let Some(r) = reach {
            if annotations[i].start < annotations[r].end {
                out.overlaps.push((r, i));
            }
            if annotations[i].end > annotations[r].end {
                reach = Some(i);
            }
        } else {
            reach = Some(i);
        }
    }
    for (i, a) in annotations.iter().enumerate() {
        let (start, end) = (round_ms(a.start), round_ms(a.end));
        let duration = end - start;
        let words = a.text.split_whitespace().count();
        // records require end > start, so this rule cannot be switched off
        let reason = if duration <= 0.0 {
            Some(RemovalReason::NonPositiveDuration)
        } else if rules.out_of_bounds && (start < 0.0 || recording_duration.is_some_and(|d| end > d + 1e-9)) {
            Some(RemovalReason::OutOfBounds)
        } else if rules.faulty_short && duration < rules.min_duration && words >= rules.min_words_for_duration_rule {
            Some(RemovalReason::FaultyShort)
        } else {
            None
        };
        if let Some(r) = reason {
            out.removed.push((i, r));
            continue;
        }
        let normalized = match normalizer.normalize(&a.text) {
            Normalized::Kept(s) => s,
            Normalized::Dropped(_) if rules.empty_transcript => {
                out.removed.push((i, RemovalReason::EmptyTranscript));
                continue;
            }
            Normalized::Dropped(_) => String::new(),
        };
        out.records.push(UtteranceRecord {
            id: format!("{recording}-{i:04}"),
            recording: recording.to_string(),
            start,
            end,
            text: a.text.clone(),
            normalized,
            split: split.to_string(),
            features: None,
        });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stats {
    pub utterances: usize,
    pub total_duration: f64,
    /// Absent for an empty manifest.
    pub mean_duration: Option<f64>,
}

/// Totals count only utterance durations, never the gaps between them.
pub fn stats(manifest: &Manifest) -> Stats {
    let total: f64 = manifest.records.iter().map(UtteranceRecord::duration).sum();
    let n = manifest.records.len();
    Stats {
        utterances: n,
        total_duration: total,
        mean_duration: (n > 0).then(|| total / n as f64),
    }
}

/// Human duration: hours above one hour, minutes above one minute.
pub fn format_duration(seconds: f64) -> String {
    if seconds >= 3600.0 {
        format!("{:.1} h", seconds / 3600.0)
    } else if seconds >= 60.0 {
        format!("{:.0} min", seconds / 60.0)
    } else {
        format!("{seconds:.2} s")
    }
}

/// Table with one row per `(dataset, split, stats)`.
pub fn stats_table(rows: &[(String, String, Stats)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} | {:<16} | {:>10} | {:>10} | {:>9}",
        "Split", "Dataset", "# Utt.", "Total Dur.", "Mean Dur."
    );
    let _ = writeln!(out, "{}", "-".repeat(65));
    for (name, split, s) in rows {
        let mean = s.mean_duration.map_or_else(|| "-".to_string(), |m| format!("{m:.2} s"));
        let _ = writeln!(
            out,
            "{:<8} | {:<16} | {:>10} | {:>10} | {:>9}",
            split,
            name,
            s.utterances,
            format_duration(s.total_duration),
            mean
        );
    }
    out
}

/// Random records whose summed duration first reaches `target` seconds, in
/// original manifest order. The total lands in `[target, target + longest)`.
pub fn subset_by_duration(manifest: &Manifest, target: f64, seed: u64) -> Result<Manifest> {
    let total = stats(manifest).total_duration;
    if target > total + 1e-9 {
        return Err(Error::TargetTooLarge { target, total });
    }
    let mut order: Vec<usize> = (0..manifest.records.len()).collect();
    order.shuffle(&mut rng::stream(seed, "subset", 0));
    let mut chosen = BTreeSet::new();
    let mut acc = 0.0;
    for i in order {
        if acc >= target - 1e-9 {
            break;
        }
        acc += manifest.records[i].duration();
        chosen.insert(i);
    }
    Ok(Manifest {
        name: manifest.name.clone(),
        split: manifest.split.clone(),
        records: chosen.into_iter().map(|i| manifest.records[i].clone()).collect(),
    })
}

/// Removes every training record whose source recording appears in any test
/// manifest.
pub fn overlap_filter(train: &Manifest, tests: &[Manifest]) -> Manifest {
    let test_recordings: HashSet<&str> = tests
        .iter()
        .flat_map(|m| m.records.iter().map(|r| r.recording.as_str()))
        .collect();
    Manifest {
        name: train.name.clone(),
        split: train.split.clone(),
        records: train
            .records
            .iter()
            .filter(|r| !test_recordings.contains(r.recording.as_str()))
            .cloned()
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, recording: &str, start: f64, end: f64) -> UtteranceRecord {
        UtteranceRecord {
            id: id.into(),
            recording: recording.into(),
            start,
            end,
            text: "la la".into(),
            normalized: "LA LA".into(),
            split: "train".into(),
            features: None,
        }
    }

    fn ann(start: f64, end: f64, text: &str) -> Annotation {
        Annotation {
            start,
            end,
            text: text.into(),
        }
    }

    #[test]
    fn short_multiword_line_is_removed() {
        let out = segment(
            "r",
            &[ann(1.0, 1.05, "several words here")],
            None,
            "train",
            &SegmentRules::default(),
            &Normalizer::default(),
        );
        assert!(out.records.is_empty());
        assert_eq!(out.removed, vec![(0, RemovalReason::FaultyShort)]);
    }

    #[test]
    fn single_line_becomes_one_record() {
        let out = segment(
            "song1",
            &[ann(0.0, 2.0, "hello world")],
            Some(10.0),
            "train",
            &SegmentRules::default(),
            &Normalizer::default(),
        );
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].duration(), 2.0);
        assert_eq!(out.records[0].normalized, "HELLO WORLD");
    }

    #[test]
    fn extra_rules_and_overlaps() {
        let anns = [
            ann(0.0, 1.0, "ok"),
            ann(0.5, 0.4, "backwards"),
            ann(0.8, 2.0, "**guitar solo**"),
            ann(9.0, 12.0, "past the end"),
        ];
        let out = segment(
            "r",
            &anns,
            Some(10.0),
            "dev",
            &SegmentRules::default(),
            &Normalizer::default(),
        );
        assert_eq!(out.records.len(), 1);
        assert_eq!(
            out.removed,
            vec![
                (1, RemovalReason::NonPositiveDuration),
                (2, RemovalReason::EmptyTranscript),
                (3, RemovalReason::OutOfBounds)
            ]
        );
        assert!(out.overlaps.contains(&(0, 2)));
        let lax = SegmentRules {
            out_of_bounds: false,
            ..Default::default()
        };
        let out = segment("r", &anns, Some(10.0), "dev", &lax, &Normalizer::default());
        assert_eq!(out.records.len(), 2);
    }

    proptest! {
        #[test]
        fn segment_partitions_input(spans in proptest::collection::vec((0.0f64..20.0, -0.5f64..3.0, 1usize..4), 0..30)) {
            let anns: Vec<Annotation> = spans
                .iter()
                .map(|&(s, d, w)| ann(s, s + d, &vec!["la"; w].join(" ")))
                .collect();
            let out = segment("r", &anns, Some(21.0), "train", &SegmentRules::default(), &Normalizer::default());
            prop_assert_eq!(out.records.len() + out.removed.len(), anns.len());
            for r in &out.records {
                prop_assert!(r.duration() > 0.0);
                if r.text.split_whitespace().count() >= 2 {
                    prop_assert!(r.duration() >= 0.1 - 1e-12);
                }
            }
        }

        #[test]
        fn stats_are_permutation_invariant(durs in proptest::collection::vec(1u32..5000, 1..20), seed in 0u64..100) {
            let records: Vec<UtteranceRecord> = durs
                .iter()
                .enumerate()
                .map(|(i, &d)| rec(&format!("u{i}"), "r", 0.0, d as f64 / 1000.0))
                .collect();
            let m = Manifest::new("x", "train", records.clone()).unwrap();
            let mut shuffled = records;
            shuffled.shuffle(&mut rng::stream(seed, "t", 0));
            let m2 = Manifest::new("x", "train", shuffled).unwrap();
            let (a, b) = (stats(&m), stats(&m2));
            prop_assert_eq!(a.utterances, b.utterances);
            prop_assert!((a.total_duration - b.total_duration).abs() < 1e-9);
        }
    }

    #[test]
    fn stats_examples() {
        let m = Manifest::new(
            "x",
            "train",
            vec![
                rec("a", "r", 0.0, 1.0),
                rec("b", "r", 1.0, 3.0),
                rec("c", "r", 5.0, 8.0),
            ],
        )
        .unwrap();
        let s = stats(&m);
        assert_eq!((s.utterances, s.total_duration, s.mean_duration), (3, 6.0, Some(2.0)));
        let e = stats(&Manifest::default());
        assert_eq!((e.utterances, e.total_duration, e.mean_duration), (0, 0.0, None));
        let table = stats_table(&[("x".into(), "train".into(), s)]);
        assert!(table.contains("# Utt.") && table.contains("Total Dur."));
    }

    fn hour_manifest() -> Manifest {
        // 1 h of utterances between 2 and 10 s
        let mut records = Vec::new();
        let mut t = 0.0;
        let mut i = 0;
        while t < 3600.0 {
            let d = 2.0 + (i * 7 % 9) as f64;
            records.push(rec(&format!("u{i:04}"), &format!("r{}", i / 10), 0.0, d));
            t += d;
            i += 1;
        }
        Manifest::new("synthetic", "train", records).unwrap()
    }

    #[test]
    fn subset_bounds_and_determinism() {
        let m = hour_manifest();
        let longest = m.records.iter().map(|r| r.duration()).fold(0.0, f64::max);
        let sub = subset_by_duration(&m, 600.0, 1).unwrap();
        let total = stats(&sub).total_duration;
        assert!(total >= 600.0 - longest && total <= 600.0 + longest, "{total}");
        assert_eq!(sub, subset_by_duration(&m, 600.0, 1).unwrap());
        let all = subset_by_duration(&m, stats(&m).total_duration, 3).unwrap();
        assert_eq!(all.records, m.records);
        assert!(matches!(
            subset_by_duration(&m, 1e9, 0),
            Err(Error::TargetTooLarge { .. })
        ));
    }

    #[test]
    fn overlap_filter_rules() {
        let train = Manifest::new(
            "t",
            "train",
            (0..8)
                .map(|i| rec(&format!("u{i}"), if i < 5 { "shared" } else { "own" }, 0.0, 1.0))
                .collect(),
        )
        .unwrap();
        let disjoint = Manifest::new("d", "test", vec![rec("x", "other", 0.0, 1.0)]).unwrap();
        assert_eq!(overlap_filter(&train, &[disjoint.clone()]), train);
        let shared = Manifest::new("s", "test", vec![rec("y", "shared", 0.0, 1.0)]).unwrap();
        let cleaned = overlap_filter(&train, &[disjoint, shared]);
        assert_eq!(cleaned.len(), 3);
        assert!(cleaned.records.iter().all(|r| r.recording != "shared"));
    }

    #[test]
    fn manifest_roundtrip_and_duplicates() {
        let mut m = hour_manifest();
        m.records[0].features = Some("feats/u0000.feat".into());
        let back = Manifest::from_jsonl(&m.to_jsonl()).unwrap();
        assert_eq!(back, m);
        let dup = Manifest::new("x", "t", vec![rec("a", "r", 0.0, 1.0), rec("a", "r", 1.0, 2.0)]);
        assert!(matches!(dup, Err(Error::DuplicateId(_))));
    }
}
