use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{detokenize, tokenize};
use crate::error::{Result, WegenError};

/// A tokenized question-generation record. `question` is absent for
/// unlabeled test inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QGExample {
    pub id: String,
    pub passage: Vec<String>,
    pub answer: Vec<String>,
    pub question: Option<Vec<String>>,
}

/// `(answer, positive passage, negative passage)`, all nonempty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub answer: Vec<String>,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QgRecord {
    pub id: String,
    pub passage: String,
    pub answer: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TripletRecord {
    pub answer: String,
    pub positive_passage: String,
    pub negative_passage: String,
}

impl From<&QGExample> for QgRecord {
    fn from(ex: &QGExample) -> Self {
        QgRecord {
            id: ex.id.clone(),
            passage: detokenize(&ex.passage),
            answer: detokenize(&ex.answer),
            question: ex.question.as_deref().map(detokenize),
        }
    }
}

impl From<&Triplet> for TripletRecord {
    fn from(t: &Triplet) -> Self {
        TripletRecord {
            answer: detokenize(&t.answer),
            positive_passage: detokenize(&t.positive),
            negative_passage: detokenize(&t.negative),
        }
    }
}

/// Calls `f(line_number, object)` for every nonblank line of a JSONL file.
pub(crate) fn for_each_json_object<F>(path: &Path, mut f: F) -> Result<()>
where
    F: FnMut(usize, &Map<String, Value>) -> std::result::Result<(), String>,
{
    let file = File::open(path).map_err(|e| WegenError::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| WegenError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| WegenError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| parse_err(format!("invalid JSON: {e}")))?;
        let Value::Object(obj) = value else {
            return Err(parse_err("expected a JSON object".into()));
        };
        f(i + 1, &obj).map_err(parse_err)?;
    }
    Ok(())
}

pub(crate) fn string_field(obj: &Map<String, Value>, key: &str) -> std::result::Result<Option<String>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(Value::Number(n)) => Ok(Some(n.to_string())),
        Some(other) => Err(format!("field {key:?} must be a string, found {other}")),
    }
}

fn required(obj: &Map<String, Value>, key: &str) -> std::result::Result<String, String> {
    string_field(obj, key)?.ok_or_else(|| format!("missing required field {key:?}"))
}

fn nonempty_tokens(text: &str, key: &str) -> std::result::Result<Vec<String>, String> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(format!("field {key:?} is empty"));
    }
    Ok(tokens)
}

pub fn read_qg_jsonl(path: &Path) -> Result<Vec<QGExample>> {
    let mut out = Vec::new();
    for_each_json_object(path, |_, obj| {
        let id = required(obj, "id")?;
        let passage = nonempty_tokens(&required(obj, "passage")?, "passage")?;
        let answer = nonempty_tokens(&required(obj, "answer")?, "answer")?;
        let question = string_field(obj, "question")?.map(|q| tokenize(&q));
        out.push(QGExample {
            id,
            passage,
            answer,
            question,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_triplet_jsonl(path: &Path) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for_each_json_object(path, |_, obj| {
        let answer = nonempty_tokens(&required(obj, "answer")?, "answer")?;
        let positive = nonempty_tokens(&required(obj, "positive_passage")?, "positive_passage")?;
        let negative = nonempty_tokens(&required(obj, "negative_passage")?, "negative_passage")?;
        out.push(Triplet {
            answer,
            positive,
            negative,
        });
        Ok(())
    })?;
    Ok(out)
}

/// Writes one serialized record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| WegenError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&r).map_err(|e| WegenError::InvalidArgument(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| WegenError::io(path, e))?;
    }
    w.flush().map_err(|e| WegenError::io(path, e))
}

pub fn write_qg_jsonl(path: &Path, examples: &[QGExample]) -> Result<()> {
    write_jsonl(path, examples.iter().map(QgRecord::from))
}

pub fn write_triplet_jsonl(path: &Path, triplets: &[Triplet]) -> Result<()> {
    write_jsonl(path, triplets.iter().map(TripletRecord::from))
}
