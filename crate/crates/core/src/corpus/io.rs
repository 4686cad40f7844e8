use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Argument, Dataset, Dialogue, Frame, LabelInventory, Sample, Span, Utterance, SHARED_ROLES};
use crate::error::{Error, Result};

fn lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = File::open(path)?;
    Ok(BufReader::new(file).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

/// Loads a dialogue file, validating roles against the shared inventory.
pub fn load_dialogues(path: impl AsRef<Path>) -> Result<Dataset> {
    load_dialogues_with(path, &LabelInventory::shared())
}

pub fn load_dialogues_with(path: impl AsRef<Path>, labels: &LabelInventory) -> Result<Dataset> {
    let path = path.as_ref();
    validate_samples(path, parse_samples(path)?, labels)
}

/// Loads a dialogue file whose role set is not known in advance: the shared
/// roles plus whatever else the file uses.
pub fn load_dialogues_open(path: impl AsRef<Path>) -> Result<(Dataset, LabelInventory)> {
    let path = path.as_ref();
    let parsed = parse_samples(path)?;
    let mut extra: Vec<&str> = Vec::new();
    for (_, s) in &parsed {
        for a in s.frames.iter().flat_map(|f| &f.arguments) {
            if !extra.contains(&a.role.as_str()) {
                extra.push(&a.role);
            }
        }
    }
    let labels = LabelInventory::shared_with(&extra);
    let data = validate_samples(path, parsed.clone(), &labels)?;
    Ok((data, labels))
}

fn parse_samples(path: &Path) -> Result<Vec<(usize, Sample)>> {
    let mut out = Vec::new();
    for (line_no, line) in lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample =
            serde_json::from_str(&line).map_err(|e| Error::record(path, line_no, e.to_string()))?;
        out.push((line_no, sample));
    }
    Ok(out)
}

fn validate_samples(path: &Path, parsed: Vec<(usize, Sample)>, labels: &LabelInventory) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(parsed.len());
    for (line_no, sample) in parsed {
        sample
            .dialogue
            .validate()
            .map_err(|e| Error::record(path, line_no, e.to_string()))?;
        for (i, frame) in sample.frames.iter().enumerate() {
            frame
                .validate(&sample.dialogue, i, labels)
                .map_err(|e| Error::record(path, line_no, e.to_string()))?;
        }
        samples.push(sample);
    }
    Ok(Dataset { samples })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: String,
    pub target: String,
}

impl ParallelPair {
    pub fn source_tokens(&self) -> Vec<String> {
        self.source.split_whitespace().map(str::to_string).collect()
    }

    pub fn target_tokens(&self) -> Vec<String> {
        self.target.split_whitespace().map(str::to_string).collect()
    }

    pub fn swapped(&self) -> ParallelPair {
        ParallelPair {
            source: self.target.clone(),
            target: self.source.clone(),
        }
    }
}

/// Tab-separated sentence pairs, one per line.
pub fn load_parallel(path: impl AsRef<Path>) -> Result<Vec<ParallelPair>> {
    let path = path.as_ref();
    let mut pairs = Vec::new();
    for (line_no, line) in lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let source = cols.next().unwrap_or_default().trim();
        let Some(target) = cols.next().map(str::trim) else {
            return Err(Error::record(path, line_no, "missing target column"));
        };
        if cols.next().is_some() {
            return Err(Error::record(path, line_no, "more than two columns"));
        }
        if source.is_empty() || target.is_empty() {
            return Err(Error::record(path, line_no, "empty side in sentence pair"));
        }
        pairs.push(ParallelPair {
            source: source.to_string(),
            target: target.to_string(),
        });
    }
    Ok(pairs)
}

#[derive(Deserialize)]
struct SrlRange {
    start: usize,
    end: usize,
}

#[derive(Deserialize)]
struct SrlArgument {
    start: usize,
    end: usize,
    role: String,
}

#[derive(Deserialize)]
struct SrlRecord {
    tokens: Vec<String>,
    predicate: Option<SrlRange>,
    #[serde(default)]
    arguments: Vec<SrlArgument>,
    #[serde(default)]
    language: Option<String>,
}

/// Maps CoNLL-style modifier names onto the shared role names.
fn normalize_role(role: &str) -> Option<&'static str> {
    let role = match role {
        "ARGM-LOC" => "ARG-LOC",
        "ARGM-TMP" => "ARG-TMP",
        "ARGM-PRP" => "ARG-PRP",
        other => other,
    };
    SHARED_ROLES.iter().copied().find(|r| *r == role)
}

/// Single-sentence SRL samples. Roles outside the shared eight are dropped.
pub fn load_srl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let labels = LabelInventory::shared();
    let mut samples = Vec::new();
    for (line_no, line) in lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SrlRecord =
            serde_json::from_str(&line).map_err(|e| Error::record(path, line_no, e.to_string()))?;
        let Some(pred) = rec.predicate else {
            return Err(Error::record(path, line_no, "sample has no predicate"));
        };
        let dialogue = Dialogue {
            id: format!("srl-{line_no}"),
            language: rec.language.unwrap_or_else(|| "und".to_string()),
            utterances: vec![Utterance {
                speaker: "S".to_string(),
                turn: 1,
                tokens: rec.tokens,
            }],
        };
        let frame = Frame {
            predicate: Span::new(0, pred.start, pred.end),
            arguments: rec
                .arguments
                .into_iter()
                .filter_map(|a| {
                    normalize_role(&a.role).map(|role| Argument {
                        span: Span::new(0, a.start, a.end),
                        role: role.to_string(),
                    })
                })
                .collect(),
        };
        dialogue
            .validate()
            .and_then(|_| frame.validate(&dialogue, 0, &labels))
            .map_err(|e| Error::record(path, line_no, e.to_string()))?;
        samples.push(Sample {
            dialogue,
            frames: vec![frame],
        });
    }
    Ok(Dataset { samples })
}

#[derive(Serialize)]
struct FrameLine<'a> {
    dialogue: &'a str,
    #[serde(flatten)]
    frame: &'a Frame,
}

/// Writes one JSON line per frame: `{"dialogue", "predicate", "arguments"}`.
pub fn write_frames<'a, W: Write>(
    mut out: W,
    frames: impl IntoIterator<Item = (&'a str, &'a Frame)>,
) -> Result<()> {
    for (dialogue, frame) in frames {
        serde_json::to_writer(&mut out, &FrameLine { dialogue, frame })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    const FIXTURE: &str = r#"{"id":"d1","language":"en","utterances":[{"speaker":"A","turn":1,"tokens":["have","you","seen","titanic"]},{"speaker":"B","turn":2,"tokens":["yes","I","have"]},{"speaker":"A","turn":3,"tokens":["did","you","like","it"]}],"frames":[{"predicate":{"utt":2,"start":2,"end":2},"arguments":[{"utt":2,"start":1,"end":1,"role":"ARG0"},{"utt":0,"start":3,"end":3,"role":"ARG1"}]}]}"#;

    #[test]
    fn empty_file_is_empty_dataset() {
        let f = file("");
        assert!(load_dialogues(f.path()).unwrap().is_empty());
    }

    #[test]
    fn loads_fixture() {
        let f = file(&format!("{FIXTURE}\n"));
        let ds = load_dialogues(f.path()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.frame_count(), 1);
        let (d, frame) = ds.frames().next().unwrap();
        assert_eq!(d.utterances.len(), 3);
        assert_eq!(frame.arguments.len(), 2);
        assert_eq!(frame.arguments[1].span, Span::new(0, 3, 3));
    }

    #[test]
    fn argument_after_predicate_turn_is_rejected() {
        let bad = FIXTURE.replace(
            r#""predicate":{"utt":2,"start":2,"end":2}"#,
            r#""predicate":{"utt":1,"start":2,"end":2}"#,
        );
        let f = file(&format!("{FIXTURE}\n{bad}\n"));
        let err = load_dialogues(f.path()).unwrap_err().to_string();
        assert!(err.contains(":2:"), "line number missing: {err}");
        assert!(err.contains("frame 0"), "frame not named: {err}");
    }

    #[test]
    fn malformed_json_reports_line() {
        let f = file(&format!("{FIXTURE}\n\n{{not json\n"));
        let err = load_dialogues(f.path()).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }

    #[test]
    fn parallel_pairs() {
        let f = file("a b\tx y\nc\tz\nd e f\tu v w\n");
        assert_eq!(load_parallel(f.path()).unwrap().len(), 3);
        assert!(load_parallel(file("").path()).unwrap().is_empty());
        assert!(load_parallel(file("only one column\n").path()).is_err());
        assert!(load_parallel(file("left\t \n").path()).is_err());
    }

    #[test]
    fn srl_filters_roles() {
        let f = file(concat!(
            r#"{"tokens":["he","ate","it","quickly","at","noon"],"predicate":{"start":1,"end":1},"arguments":[{"start":0,"end":0,"role":"ARG0"},{"start":2,"end":2,"role":"ARG1"},{"start":3,"end":3,"role":"ARGM-MNR"},{"start":5,"end":5,"role":"ARG-TMP"}]}"#,
            "\n"
        ));
        let ds = load_srl(f.path()).unwrap();
        let roles: Vec<&str> = ds.samples[0].frames[0]
            .arguments
            .iter()
            .map(|a| a.role.as_str())
            .collect();
        assert_eq!(roles, ["ARG0", "ARG1", "ARG-TMP"]);
        assert_eq!(ds.samples[0].dialogue.utterances.len(), 1);

        let missing = file(r#"{"tokens":["a"],"arguments":[]}"#);
        assert!(load_srl(missing.path()).is_err());
    }

    #[test]
    fn loading_is_idempotent() {
        let f = file(&format!("{FIXTURE}\n"));
        assert_eq!(load_dialogues(f.path()).unwrap(), load_dialogues(f.path()).unwrap());
    }

    #[test]
    fn frames_are_written_in_corpus_schema() {
        let f = file(&format!("{FIXTURE}\n"));
        let ds = load_dialogues(f.path()).unwrap();
        let mut buf = Vec::new();
        write_frames(&mut buf, ds.frames().map(|(d, fr)| (d.id.as_str(), fr))).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["dialogue"], "d1");
        assert_eq!(v["predicate"]["utt"], 2);
        assert_eq!(v["arguments"][1]["role"], "ARG1");
    }
}
