//! Dataset records, label encoding per task, class-weight defaults and the
//! Memotion CSV converter.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embeddings::tokenize;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Neutral,
    Negative,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Positive, Sentiment::Neutral, Sentiment::Negative];

    /// Class index; the order matches the `[pos, neu, neg]` weight layout.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Positive => "positive",
            Sentiment::Neutral => "neutral",
            Sentiment::Negative => "negative",
        }
    }
}

pub const AFFECTS: [&str; 4] = ["humor", "sarcasm", "offense", "motivation"];

/// Gold labels for all three tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskLabelSet {
    pub sentiment: Sentiment,
    /// humor, sarcasm, offense, motivation presence bits
    pub affect: [u8; 4],
    /// graded levels, 0 meaning absent
    pub levels: [u8; 4],
}

impl TaskLabelSet {
    pub const LEVEL_CLASSES: [usize; 4] = [4, 4, 4, 2];

    pub fn validate(&self) -> std::result::Result<(), String> {
        for (i, name) in AFFECTS.iter().enumerate() {
            if self.affect[i] > 1 {
                return Err(format!("{name} must be 0 or 1, got {}", self.affect[i]));
            }
            if usize::from(self.levels[i]) >= Self::LEVEL_CLASSES[i] {
                return Err(format!("{name}_level {} out of range", self.levels[i]));
            }
            if (self.levels[i] == 0) != (self.affect[i] == 0) {
                return Err(format!(
                    "{name}_level {} inconsistent with {name} bit {}",
                    self.levels[i], self.affect[i]
                ));
            }
        }
        Ok(())
    }

    /// Gold class for head `head` of `task`.
    pub fn gold(&self, task: Task, head: usize) -> usize {
        match task {
            Task::Sentiment => self.sentiment.index(),
            Task::Affect => usize::from(self.affect[head]),
            Task::Quant => usize::from(self.levels[head]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sentiment,
    Affect,
    Quant,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Sentiment => "sentiment",
            Task::Affect => "affect",
            Task::Quant => "quant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sentiment" => Ok(Task::Sentiment),
            "affect" | "affect_cls" => Ok(Task::Affect),
            "quant" | "affect_quant" => Ok(Task::Quant),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }

    pub fn spec(self) -> TaskSpec {
        let heads = match self {
            Task::Sentiment => vec![HeadSpec::new("sentiment", 3)],
            Task::Affect => AFFECTS.iter().map(|a| HeadSpec::new(a, 2)).collect(),
            Task::Quant => AFFECTS
                .iter()
                .zip(TaskLabelSet::LEVEL_CLASSES)
                .map(|(a, c)| HeadSpec::new(&format!("{a}_level"), c))
                .collect(),
        };
        TaskSpec { task: self, heads }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub classes: usize,
}

impl HeadSpec {
    fn new(name: &str, classes: usize) -> Self {
        HeadSpec {
            name: name.to_string(),
            classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub heads: Vec<HeadSpec>,
}

/// Per-head class weights for the weighted NLL loss.
pub fn default_class_weights(task: Task) -> Vec<Vec<f64>> {
    match task {
        // [positive, neutral, negative]
        Task::Sentiment => vec![vec![1.0, 1.5, 2.0]],
        // [absent, present] for humor, sarcasm, offense, motivation
        Task::Affect => vec![vec![1.5, 1.0], vec![1.5, 1.0], vec![1.25, 1.0], vec![1.0, 1.25]],
        Task::Quant => TaskLabelSet::LEVEL_CLASSES.iter().map(|&c| vec![1.0; c]).collect(),
    }
}

/// Checks a weight layout against a task's heads.
pub fn check_class_weights(spec: &TaskSpec, weights: &[Vec<f64>]) -> Result<()> {
    if weights.len() != spec.heads.len() {
        return Err(Error::Config(format!(
            "{} class-weight vectors for {} heads",
            weights.len(),
            spec.heads.len()
        )));
    }
    for (h, w) in spec.heads.iter().zip(weights) {
        if w.len() != h.classes || w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("bad class weights {w:?} for head {}", h.name)));
        }
    }
    Ok(())
}

/// One line of the dataset JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemeRecord {
    pub id: String,
    pub segments: Vec<String>,
    pub feature_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentiment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub humor: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sarcasm: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offense: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motivation: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub humor_level: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sarcasm_level: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offense_level: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motivation_level: Option<u8>,
}

impl MemeRecord {
    fn labels(&self) -> std::result::Result<Option<TaskLabelSet>, String> {
        let ints = [
            self.humor,
            self.sarcasm,
            self.offense,
            self.motivation,
            self.humor_level,
            self.sarcasm_level,
            self.offense_level,
            self.motivation_level,
        ];
        let present = ints.iter().filter(|v| v.is_some()).count() + usize::from(self.sentiment.is_some());
        if present == 0 {
            return Ok(None);
        }
        if present != 9 {
            return Err("label fields must be all present or all absent".into());
        }
        let sentiment = match self.sentiment.as_deref() {
            Some("positive") => Sentiment::Positive,
            Some("neutral") => Sentiment::Neutral,
            Some("negative") => Sentiment::Negative,
            other => return Err(format!("unknown sentiment {other:?}")),
        };
        let v: Vec<u8> = ints.iter().map(|v| v.expect("counted above")).collect();
        let labels = TaskLabelSet {
            sentiment,
            affect: [v[0], v[1], v[2], v[3]],
            levels: [v[4], v[5], v[6], v[7]],
        };
        labels.validate()?;
        Ok(Some(labels))
    }

    pub fn from_sample(s: &MemeSample) -> Self {
        let l = s.labels;
        MemeRecord {
            id: s.id.clone(),
            segments: s.segments.clone(),
            feature_path: s.feature_path.clone(),
            sentiment: l.map(|l| l.sentiment.as_str().to_string()),
            humor: l.map(|l| l.affect[0]),
            sarcasm: l.map(|l| l.affect[1]),
            offense: l.map(|l| l.affect[2]),
            motivation: l.map(|l| l.affect[3]),
            humor_level: l.map(|l| l.levels[0]),
            sarcasm_level: l.map(|l| l.levels[1]),
            offense_level: l.map(|l| l.levels[2]),
            motivation_level: l.map(|l| l.levels[3]),
        }
    }
}

/// A validated meme: ordered text segments, its feature map and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MemeSample {
    pub id: String,
    pub segments: Vec<String>,
    /// Path as written in the dataset file.
    pub feature_path: String,
    /// `feature_path` resolved against the dataset file's directory.
    pub resolved_feature_path: PathBuf,
    pub labels: Option<TaskLabelSet>,
}

impl MemeSample {
    pub fn tokens(&self) -> Vec<Vec<String>> {
        self.segments.iter().map(|s| tokenize(s)).collect()
    }

    fn from_record(rec: MemeRecord, base: &Path) -> Result<Self> {
        let invalid = |msg: String| Error::Validation {
            id: rec.id.clone(),
            msg,
        };
        if rec.segments.is_empty() {
            return Err(invalid("at least one text segment is required".into()));
        }
        if let Some(i) = rec.segments.iter().position(|s| tokenize(s).is_empty()) {
            return Err(invalid(format!("segment {i} has no tokens")));
        }
        let labels = rec.labels().map_err(invalid)?;
        let resolved = base.join(&rec.feature_path);
        Ok(MemeSample {
            resolved_feature_path: resolved,
            id: rec.id,
            segments: rec.segments,
            feature_path: rec.feature_path,
            labels,
        })
    }
}

/// Counts per class, for logging and converter checks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub memes: usize,
    pub segments: usize,
    pub sentiment: BTreeMap<String, usize>,
    pub affect_present: BTreeMap<String, usize>,
}

impl DatasetSummary {
    pub fn of(samples: &[MemeSample]) -> Self {
        let mut s = DatasetSummary {
            memes: samples.len(),
            segments: samples.iter().map(|m| m.segments.len()).sum(),
            ..Default::default()
        };
        for l in samples.iter().filter_map(|m| m.labels.as_ref()) {
            *s.sentiment.entry(l.sentiment.as_str().to_string()).or_default() += 1;
            for (i, a) in AFFECTS.iter().enumerate() {
                *s.affect_present.entry(a.to_string()).or_default() += usize::from(l.affect[i]);
            }
        }
        s
    }
}

fn read_records(path: &Path) -> Result<Vec<(usize, MemeRecord)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MemeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        out.push((n + 1, rec));
    }
    Ok(out)
}

/// Loads and validates a dataset JSONL file; feature files must exist.
pub fn load_dataset(path: &Path) -> Result<Vec<MemeSample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for (_, rec) in read_records(path)? {
        let s = MemeSample::from_record(rec, base)?;
        if !s.resolved_feature_path.is_file() {
            return Err(Error::io(
                &s.resolved_feature_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, format!("feature file for `{}` not found", s.id)),
            ));
        }
        samples.push(s);
    }
    let summary = DatasetSummary::of(&samples);
    log::info!(
        "{}: {} memes, {} segments, sentiment {:?}, affects {:?}",
        path.display(),
        summary.memes,
        summary.segments,
        summary.sentiment,
        summary.affect_present
    );
    Ok(samples)
}

pub fn write_dataset(samples: &[MemeSample], path: &Path) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for s in samples {
        let line = serde_json::to_string(&MemeRecord::from_sample(s))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

// ── Memotion CSV conversion ───────────────────────────────────────────────

#[derive(Debug, Clone, Default, Serialize)]
pub struct ConversionReport {
    pub converted: usize,
    pub segments: usize,
    /// (1-based data row, reason)
    pub excluded: Vec<(usize, String)>,
}

fn level(value: &str, scale: &[&[&str]]) -> Option<u8> {
    let v = value.trim().to_lowercase().replace([' ', '-'], "_");
    scale.iter().position(|names| names.contains(&v.as_str())).map(|p| p as u8)
}

const HUMOR: &[&[&str]] = &[&["not_funny"], &["funny"], &["very_funny"], &["hilarious"]];
const SARCASM: &[&[&str]] = &[&["not_sarcastic"], &["general", "little_sarcastic"], &["twisted_meaning"], &["very_twisted"]];
const OFFENSE: &[&[&str]] = &[&["not_offensive"], &["slight", "slightly_offensive"], &["very_offensive"], &["hateful_offensive"]];
const MOTIVATION: &[&[&str]] = &[&["not_motivational"], &["motivational"]];

fn sentiment_of(value: &str) -> Option<Sentiment> {
    match value.trim().to_lowercase().replace([' ', '-'], "_").as_str() {
        "very_positive" | "positive" => Some(Sentiment::Positive),
        "neutral" => Some(Sentiment::Neutral),
        "very_negative" | "negative" => Some(Sentiment::Negative),
        _ => None,
    }
}

/// Maps the published Memotion label CSV onto dataset records.
///
/// Columns are located by header name: `image_name`, `text_corrected`
/// (falling back to `text_ocr`), `humour`, `sarcasm`, `offensive`,
/// `motivational`, `overall_sentiment`. Text is split into segments on
/// `delimiter`; each meme's feature file is `<features_dir>/<image stem>.mfm`.
/// Rows with missing text or unrecognised labels are excluded and reported.
pub fn convert_memotion_csv(csv_path: &Path, features_dir: &str, delimiter: &str) -> Result<(Vec<MemeRecord>, ConversionReport)> {
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| Error::Parse {
        path: csv_path.to_path_buf(),
        line: 1,
        msg: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: csv_path.to_path_buf(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let need = |name: &str| {
        col(name).ok_or_else(|| Error::Parse {
            path: csv_path.to_path_buf(),
            line: 1,
            msg: format!("missing column `{name}`"),
        })
    };
    let image = need("image_name")?;
    let text = col("text_corrected").or(col("text_ocr")).ok_or_else(|| Error::Parse {
        path: csv_path.to_path_buf(),
        line: 1,
        msg: "missing text column".into(),
    })?;
    let (humour, sarcasm, offensive, motivational, overall) = (
        need("humour")?,
        need("sarcasm")?,
        need("offensive")?,
        need("motivational")?,
        need("overall_sentiment")?,
    );

    let mut records = Vec::new();
    let mut report = ConversionReport::default();
    for (row, result) in reader.records().enumerate() {
        let row = row + 1;
        let rec = match result {
            Ok(r) => r,
            Err(e) => {
                report.excluded.push((row, e.to_string()));
                continue;
            }
        };
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        let segments: Vec<String> = field(text)
            .split(delimiter)
            .map(str::trim)
            .filter(|s| !tokenize(s).is_empty())
            .map(str::to_string)
            .collect();
        if segments.is_empty() {
            report.excluded.push((row, "no text".into()));
            continue;
        }
        let levels = [
            level(&field(humour), HUMOR),
            level(&field(sarcasm), SARCASM),
            level(&field(offensive), OFFENSE),
            level(&field(motivational), MOTIVATION),
        ];
        let (Some(sent), [Some(h), Some(s), Some(o), Some(m)]) = (sentiment_of(&field(overall)), levels) else {
            report.excluded.push((row, "unrecognised label value".into()));
            continue;
        };
        let image_name = field(image);
        let stem = Path::new(image_name.trim())
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if stem.is_empty() {
            report.excluded.push((row, "no image name".into()));
            continue;
        }
        let bit = |l: u8| u8::from(l > 0);
        report.converted += 1;
        report.segments += segments.len();
        records.push(MemeRecord {
            id: stem.clone(),
            segments,
            feature_path: format!("{}/{stem}.mfm", features_dir.trim_end_matches('/')),
            sentiment: Some(sent.as_str().to_string()),
            humor: Some(bit(h)),
            sarcasm: Some(bit(s)),
            offense: Some(bit(o)),
            motivation: Some(bit(m)),
            humor_level: Some(h),
            sarcasm_level: Some(s),
            offense_level: Some(o),
            motivation_level: Some(m),
        });
    }
    Ok((records, report))
}

pub fn write_records(records: &[MemeRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, sentiment: &str, humor: u8, humor_level: u8) -> String {
        format!(
            r#"{{"id":"{id}","segments":["top text","bottom text"],"feature_path":"f.mfm","sentiment":"{sentiment}","humor":{humor},"sarcasm":0,"offense":1,"motivation":0,"humor_level":{humor_level},"sarcasm_level":0,"offense_level":2,"motivation_level":0}}"#
        )
    }

    fn write(dir: &Path, lines: &[String]) -> PathBuf {
        fs::write(dir.join("f.mfm"), b"MFM1").unwrap();
        let p = dir.join("d.jsonl");
        fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    #[test]
    fn loads_two_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &[line("a", "positive", 1, 2), line("b", "neutral", 0, 0)]);
        let s = load_dataset(&p).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].labels.unwrap().levels, [2, 0, 2, 0]);
        assert_eq!(s[1].labels.unwrap().sentiment, Sentiment::Neutral);
        let summary = DatasetSummary::of(&s);
        assert_eq!(summary.segments, 4);
        assert_eq!(summary.affect_present["offense"], 2);
    }

    #[test]
    fn validation_errors_name_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &[line("meh-meme", "meh", 1, 1)]);
        match load_dataset(&p) {
            Err(Error::Validation { id, .. }) => assert_eq!(id, "meh-meme"),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), &[line("lvl", "positive", 0, 2)]);
        assert!(matches!(load_dataset(&p), Err(Error::Validation { .. })));
    }

    #[test]
    fn malformed_line_and_missing_features() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &[line("a", "positive", 1, 1), "{not json".into()]);
        assert!(matches!(load_dataset(&p), Err(Error::Parse { line: 2, .. })));
        let p = dir.path().join("g.jsonl");
        fs::write(&p, line("a", "positive", 1, 1).replace("f.mfm", "missing.mfm")).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Io { .. })));
    }

    #[test]
    fn unlabeled_and_partially_labeled() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &[r#"{"id":"x","segments":["hi"],"feature_path":"f.mfm"}"#.into()]);
        assert!(load_dataset(&p).unwrap()[0].labels.is_none());
        let p = write(dir.path(), &[r#"{"id":"x","segments":["hi"],"feature_path":"f.mfm","humor":1}"#.into()]);
        assert!(matches!(load_dataset(&p), Err(Error::Validation { .. })));
        let p = write(dir.path(), &[r#"{"id":"x","segments":[],"feature_path":"f.mfm"}"#.into()]);
        assert!(matches!(load_dataset(&p), Err(Error::Validation { .. })));
    }

    #[test]
    fn class_weight_defaults() {
        assert_eq!(default_class_weights(Task::Sentiment), vec![vec![1.0, 1.5, 2.0]]);
        assert_eq!(default_class_weights(Task::Affect)[3], vec![1.0, 1.25]);
        assert_eq!(default_class_weights(Task::Affect)[2], vec![1.25, 1.0]);
        assert_eq!(default_class_weights(Task::Quant)[0], vec![1.0; 4]);
        assert!(matches!(Task::parse("bogus"), Err(Error::Config(_))));
        for t in [Task::Sentiment, Task::Affect, Task::Quant] {
            check_class_weights(&t.spec(), &default_class_weights(t)).unwrap();
        }
        assert!(check_class_weights(&Task::Affect.spec(), &default_class_weights(Task::Sentiment)).is_err());
    }

    #[test]
    fn task_head_layout() {
        let sizes = |t: Task| t.spec().heads.iter().map(|h| h.classes).collect::<Vec<_>>();
        assert_eq!(sizes(Task::Sentiment), vec![3]);
        assert_eq!(sizes(Task::Affect), vec![2, 2, 2, 2]);
        assert_eq!(sizes(Task::Quant), vec![4, 4, 4, 2]);
    }

    #[test]
    fn converts_memotion_rows() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("labels.csv");
        fs::write(
            &csv,
            "\
,image_name,text_ocr,text_corrected,humour,sarcasm,offensive,motivational,overall_sentiment
0,image_1.jpg,x,\"LOOK AT ME\nI AM THE CAPTAIN\",hilarious,general,not_offensive,not_motivational,very_positive
1,image_2.png,x,,funny,general,slight,motivational,neutral
2,image_3.jpg,x,just text,funny,bogus,slight,motivational,negative
3,image_4.jpg,x,only one,not_funny,not_sarcastic,hateful_offensive,motivational,very_negative
",
        )
        .unwrap();
        let (recs, report) = convert_memotion_csv(&csv, "feats", "\n").unwrap();
        assert_eq!(report.converted, 2);
        assert_eq!(report.segments, 3);
        assert_eq!(report.excluded.len(), 2);
        assert_eq!(recs[0].segments, vec!["LOOK AT ME", "I AM THE CAPTAIN"]);
        assert_eq!(recs[0].feature_path, "feats/image_1.mfm");
        assert_eq!(recs[0].humor_level, Some(3));
        assert_eq!(recs[0].sarcasm_level, Some(1));
        assert_eq!(recs[1].offense_level, Some(3));
        assert_eq!(recs[1].humor, Some(0));
        assert_eq!(recs[1].sentiment.as_deref(), Some("negative"));
    }
}
