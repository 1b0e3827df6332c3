//! Line-delimited post dataset format.
//!
//! The first line is a header object carrying the fixture dimensions:
//!
//! ```text
//! {"format":"tempofuse-posts","version":1,"seq_len":12,"d_xlmr":32,"d_clip":48}
//! ```
//!
//! Every following line is one post with its embeddings flattened row-major.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const FORMAT_NAME: &str = "tempofuse-posts";
pub const FORMAT_VERSION: u32 = 1;

/// One social-media item with fixture encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PostRecord {
    pub id: String,
    /// Unix seconds.
    pub timestamp: i64,
    /// `seq_len × d_xlmr` token embeddings; row 0 is the sentence token.
    pub text_emb: Tensor,
    /// `1 × d_clip` image embedding.
    pub img_emb: Tensor,
    /// 0 genuine, 1 misleading.
    pub label: u8,
    /// 0 inconsistent, 1 consistent.
    pub match_label: u8,
    pub domain_id: usize,
}

impl PostRecord {
    /// Ordering key used everywhere posts are arranged in time.
    pub fn time_key(&self) -> (i64, &str) {
        (self.timestamp, self.id.as_str())
    }
}

/// Sorts by `(timestamp, id)`.
pub fn sort_by_time(posts: &mut [&PostRecord]) {
    posts.sort_by(|a, b| a.time_key().cmp(&b.time_key()));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: FormatTag,
    pub version: u32,
    pub seq_len: usize,
    pub d_xlmr: usize,
    pub d_clip: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FormatTag {
    #[serde(rename = "tempofuse-posts")]
    Posts,
}

impl DatasetHeader {
    pub fn new(seq_len: usize, d_xlmr: usize, d_clip: usize) -> Self {
        Self {
            format: FormatTag::Posts,
            version: FORMAT_VERSION,
            seq_len,
            d_xlmr,
            d_clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<PostRecord>,
}

#[derive(Serialize)]
struct RecordLine<'a> {
    id: &'a str,
    timestamp: i64,
    text_emb: &'a [f64],
    img_emb: &'a [f64],
    label: u8,
    match_label: u8,
    domain_id: usize,
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, records: &[PostRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset_to(&mut w, header, records).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset_to<W: Write>(w: &mut W, header: &DatasetHeader, records: &[PostRecord]) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, header)?;
    w.write_all(b"\n")?;
    for r in records {
        let line = RecordLine {
            id: &r.id,
            timestamp: r.timestamp,
            text_emb: r.text_emb.data(),
            img_emb: r.img_emb.data(),
            label: r.label,
            match_label: r.match_label,
            domain_id: r.domain_id,
        };
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Loads a dataset file; an empty file yields an empty dataset with a zero header.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => {
                return Ok(Dataset {
                    header: DatasetHeader::new(0, 0, 0),
                    records: Vec::new(),
                })
            }
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io("<dataset>", e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let h: DatasetHeader = serde_json::from_str(&line)
                    .map_err(|e| Error::malformed(1, "header", e.to_string()))?;
                if h.version != FORMAT_VERSION {
                    return Err(Error::malformed(1, "version", format!("unsupported version {}", h.version)));
                }
                for (name, v) in [("seq_len", h.seq_len), ("d_xlmr", h.d_xlmr), ("d_clip", h.d_clip)] {
                    if v == 0 {
                        return Err(Error::malformed(1, name, "must be positive"));
                    }
                }
                break h;
            }
        }
    };
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(&line, i + 1, &header)?);
    }
    Ok(Dataset { header, records })
}

fn parse_record(line: &str, lineno: usize, h: &DatasetHeader) -> Result<PostRecord> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::malformed(lineno, "record", e.to_string()))?;
    let Value::Object(map) = value else {
        return Err(Error::malformed(lineno, "record", "expected a JSON object"));
    };
    const KNOWN: [&str; 7] = ["id", "timestamp", "text_emb", "img_emb", "label", "match_label", "domain_id"];
    if let Some(k) = map.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(Error::malformed(lineno, k.clone(), "unknown field"));
    }
    let id = match field(&map, "id", lineno)? {
        Value::String(s) if !s.is_empty() => s.clone(),
        _ => return Err(Error::malformed(lineno, "id", "expected a non-empty string")),
    };
    let timestamp = field(&map, "timestamp", lineno)?
        .as_i64()
        .ok_or_else(|| Error::malformed(lineno, "timestamp", "expected an integer"))?;
    let text = floats(&map, "text_emb", lineno)?;
    if text.len() != h.seq_len * h.d_xlmr {
        return Err(Error::malformed(
            lineno,
            "text_emb",
            format!("expected {}x{} = {} values, got {}", h.seq_len, h.d_xlmr, h.seq_len * h.d_xlmr, text.len()),
        ));
    }
    let img = floats(&map, "img_emb", lineno)?;
    if img.len() != h.d_clip {
        return Err(Error::malformed(
            lineno,
            "img_emb",
            format!("expected {} values, got {}", h.d_clip, img.len()),
        ));
    }
    let label = binary(&map, "label", lineno)?;
    let match_label = binary(&map, "match_label", lineno)?;
    let domain_id = field(&map, "domain_id", lineno)?
        .as_u64()
        .ok_or_else(|| Error::malformed(lineno, "domain_id", "expected a nonnegative integer"))?
        as usize;
    Ok(PostRecord {
        id,
        timestamp,
        text_emb: Tensor::new(h.seq_len, h.d_xlmr, text).expect("length checked"),
        img_emb: Tensor::new(1, h.d_clip, img).expect("length checked"),
        label,
        match_label,
        domain_id,
    })
}

fn field<'a>(map: &'a Map<String, Value>, name: &str, line: usize) -> Result<&'a Value> {
    map.get(name).ok_or_else(|| Error::malformed(line, name, "missing"))
}

fn floats(map: &Map<String, Value>, name: &str, line: usize) -> Result<Vec<f64>> {
    let Value::Array(items) = field(map, name, line)? else {
        return Err(Error::malformed(line, name, "expected an array of numbers"));
    };
    if items.is_empty() {
        return Err(Error::malformed(line, name, "empty embedding"));
    }
    items
        .iter()
        .map(|v| match v.as_f64() {
            Some(x) if x.is_finite() => Ok(x),
            _ => Err(Error::malformed(line, name, "entries must be finite numbers")),
        })
        .collect()
}

fn binary(map: &Map<String, Value>, name: &str, line: usize) -> Result<u8> {
    match field(map, name, line)?.as_u64() {
        Some(v @ (0 | 1)) => Ok(v as u8),
        _ => Err(Error::malformed(line, name, "expected 0 or 1")),
    }
}
