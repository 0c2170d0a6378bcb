//! Binary episode records and the JSON dataset manifest.
//!
//! A dataset file is a concatenation of records. Each record is a little-endian
//! `u64` payload length followed by the payload:
//!
//! ```text
//! u8  task index        u8 source       u8 outcome
//! f64 score             u64 seed
//! u16 n_spans, then per span: u16 name_len, name bytes, u32 start, u32 len
//! u32 d_o  u32 H  u32 d_a  u32 n_steps
//! n_steps × (d_o f64 observation, H·d_a f64 chunk)
//! d_o f64 terminal observation
//! ```
//!
//! All reals are IEEE-754 `f64`, little-endian, so decoding is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{ActionChunk, Episode, Observation, Outcome, Source, Step, TaskId, ViewLayout, ViewSpan};
use crate::error::{Error, Result};

pub const DATASET_EXT: &str = "epb";

pub fn encode_episode(e: &Episode) -> Vec<u8> {
    let mut p = Vec::new();
    p.push(e.task.index() as u8);
    p.push(e.source.code());
    p.push(match e.outcome {
        Outcome::Success => 1,
        Outcome::Failure => 0,
    });
    p.extend_from_slice(&e.score.to_le_bytes());
    p.extend_from_slice(&e.seed.to_le_bytes());

    let layout = e.terminal.layout();
    p.extend_from_slice(&(layout.spans().len() as u16).to_le_bytes());
    for span in layout.spans() {
        p.extend_from_slice(&(span.name.len() as u16).to_le_bytes());
        p.extend_from_slice(span.name.as_bytes());
        p.extend_from_slice(&(span.start as u32).to_le_bytes());
        p.extend_from_slice(&(span.len as u32).to_le_bytes());
    }

    let (h, d_a) = e
        .steps
        .first()
        .map_or((0, 0), |s| (s.chunk.horizon(), s.chunk.action_dim()));
    for dim in [e.terminal.dim(), h, d_a, e.steps.len()] {
        p.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for step in &e.steps {
        for v in step.obs.values().iter().chain(step.chunk.as_flat()) {
            p.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in e.terminal.values() {
        p.extend_from_slice(&v.to_le_bytes());
    }

    let mut out = Vec::with_capacity(p.len() + 8);
    out.extend_from_slice(&(p.len() as u64).to_le_bytes());
    out.extend_from_slice(&p);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Decode {
                field,
                reason: format!(
                    "truncated: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, field: &'static str) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8, field)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

fn invalid(field: &'static str, err: Error) -> Error {
    Error::Decode {
        field,
        reason: err.to_string(),
    }
}

fn decode_payload(payload: &[u8]) -> Result<Episode> {
    let mut r = Reader { buf: payload, pos: 0 };
    let task = TaskId::from_index(r.u8("task")? as usize).map_err(|e| invalid("task", e))?;
    let source_code = r.u8("source")?;
    let source = Source::from_code(source_code).ok_or(Error::Decode {
        field: "source",
        reason: format!("unknown source code {source_code}"),
    })?;
    let outcome = match r.u8("outcome")? {
        1 => Outcome::Success,
        0 => Outcome::Failure,
        c => {
            return Err(Error::Decode {
                field: "outcome",
                reason: format!("unknown outcome code {c}"),
            })
        }
    };
    let score = f64::from_le_bytes(r.take(8, "score")?.try_into().unwrap());
    let seed = r.u64("seed")?;

    let n_spans = r.u16("view_spans")? as usize;
    let mut spans = Vec::with_capacity(n_spans);
    for _ in 0..n_spans {
        let len = r.u16("view_spans.name")? as usize;
        let name = std::str::from_utf8(r.take(len, "view_spans.name")?)
            .map_err(|e| Error::Decode {
                field: "view_spans.name",
                reason: e.to_string(),
            })?
            .to_string();
        let start = r.u32("view_spans.start")?;
        let len = r.u32("view_spans.len")?;
        spans.push(ViewSpan { name, start, len });
    }
    let layout = Arc::new(ViewLayout::new(spans).map_err(|e| invalid("view_spans", e))?);

    let d_o = r.u32("d_o")?;
    let h = r.u32("H")?;
    let d_a = r.u32("d_a")?;
    let n_steps = r.u32("n_steps")?;
    if d_o != layout.dim() {
        return Err(Error::Decode {
            field: "d_o",
            reason: format!("{d_o} disagrees with view spans ({})", layout.dim()),
        });
    }
    let mut steps = Vec::with_capacity(n_steps.min(1 << 16));
    for _ in 0..n_steps {
        let obs = Observation::new(r.f64s(d_o, "steps.obs")?, layout.clone())
            .map_err(|e| invalid("steps.obs", e))?;
        let chunk = ActionChunk::new(h, d_a, r.f64s(h * d_a, "steps.chunk")?)
            .map_err(|e| invalid("steps.chunk", e))?;
        steps.push(Step { obs, chunk });
    }
    let terminal = Observation::new(r.f64s(d_o, "terminal")?, layout)
        .map_err(|e| invalid("terminal", e))?;
    if r.pos != payload.len() {
        return Err(Error::Decode {
            field: "record_length",
            reason: format!("{} trailing bytes", payload.len() - r.pos),
        });
    }
    Ok(Episode {
        task,
        steps,
        terminal,
        source,
        outcome,
        score,
        seed,
    })
}

/// Decodes exactly one record; the buffer must contain nothing else.
pub fn decode_episode(bytes: &[u8]) -> Result<Episode> {
    let mut episodes = decode_all(bytes)?;
    match episodes.len() {
        1 => Ok(episodes.pop().unwrap()),
        n => Err(Error::Decode {
            field: "record_length",
            reason: format!("expected one record, found {n}"),
        }),
    }
}

/// Decodes a concatenation of records. An empty buffer yields no episodes.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<Episode>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u64("record_length")? as usize;
        let payload = r.take(len, "record_length")?;
        out.push(decode_payload(payload)?);
    }
    Ok(out)
}

/// Metadata sidecar written next to every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task_table: Vec<String>,
    pub d_o: usize,
    pub d_a: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub n_episodes: usize,
    pub created_seed: u64,
    #[serde(default)]
    pub source_counts: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn describe(episodes: &[Episode], seed: u64) -> Self {
        let first = episodes.first();
        let mut source_counts = BTreeMap::new();
        for e in episodes {
            let key = serde_json::to_value(e.source)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            *source_counts.entry(key).or_insert(0) += 1;
        }
        DatasetManifest {
            task_table: TaskId::ALL.iter().map(|t| t.name().to_string()).collect(),
            d_o: first.map_or(0, |e| e.terminal.dim()),
            d_a: first
                .and_then(|e| e.steps.first())
                .map_or(0, |s| s.chunk.action_dim()),
            horizon: first
                .and_then(|e| e.steps.first())
                .map_or(0, |s| s.chunk.horizon()),
            n_episodes: episodes.len(),
            created_seed: seed,
            source_counts,
        }
    }
}

/// File paths of a dataset split inside `<run>/data/`.
pub fn split_paths(data_dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    (
        data_dir.join(format!("{split}.{DATASET_EXT}")),
        data_dir.join(format!("{split}.manifest.json")),
    )
}

pub fn write_dataset(data_dir: &Path, split: &str, episodes: &[Episode], seed: u64) -> Result<DatasetManifest> {
    fs::create_dir_all(data_dir)?;
    let (data_path, manifest_path) = split_paths(data_dir, split);
    let mut file = fs::File::create(&data_path)?;
    for e in episodes {
        file.write_all(&encode_episode(e))?;
    }
    file.flush()?;
    let manifest = DatasetManifest::describe(episodes, seed);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Appends one record to a dataset file (single writer).
pub fn append_episode(path: &Path, e: &Episode) -> Result<()> {
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(&encode_episode(e))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Episode>> {
    decode_all(&fs::read(path)?)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_episode(seed: u64) -> Episode {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d_p = rng.gen_range(1..4);
        let d_s = rng.gen_range(1..6);
        let layout = Arc::new(ViewLayout::contiguous(&[("proprio", d_p), ("scene", d_s)]));
        let h = rng.gen_range(1..6);
        let d_a = rng.gen_range(1..4);
        let t_len = rng.gen_range(1..20);
        let obs = |rng: &mut rand_chacha::ChaCha8Rng| {
            Observation::new((0..d_p + d_s).map(|_| rng.gen::<f64>() * 1e3 - 5e2).collect(), layout.clone()).unwrap()
        };
        let steps = (0..t_len)
            .map(|_| Step {
                obs: obs(&mut rng),
                chunk: ActionChunk::new(h, d_a, (0..h * d_a).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            })
            .collect();
        let success = rng.gen_bool(0.5);
        Episode {
            task: TaskId::from_index(rng.gen_range(0..2)).unwrap(),
            steps,
            terminal: obs(&mut rng),
            source: if success { Source::Expert } else { Source::RolloutFailure },
            outcome: if success { Outcome::Success } else { Outcome::Failure },
            score: rng.gen_range(0.0..10.0),
            seed: rng.gen(),
        }
    }

    #[test]
    fn randomized_round_trip() {
        for seed in 0..100 {
            let e = random_episode(seed);
            assert_eq!(decode_episode(&encode_episode(&e)).unwrap(), e);
        }
    }

    #[test]
    fn truncated_step_list_names_the_field() {
        let e = random_episode(3);
        let bytes = encode_episode(&e);
        let mut cut = bytes[..bytes.len() - 8 * (e.terminal.dim() + 1)].to_vec();
        // Patch the length prefix so framing passes and the payload itself is short.
        let new_len = (cut.len() - 8) as u64;
        cut[..8].copy_from_slice(&new_len.to_le_bytes());
        match decode_episode(&cut) {
            Err(Error::Decode { field, .. }) => assert!(field.starts_with("steps") || field == "terminal"),
            other => panic!("unexpected {other:?}"),
        }
        // And an unpatched cut trips the framing check.
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode_episode(short),
            Err(Error::Decode { field: "record_length", .. })
        ));
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.epb");
        fs::write(&path, b"").unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn dataset_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let eps: Vec<Episode> = (0..5).map(random_episode).collect();
        let m = write_dataset(dir.path(), "train", &eps, 42).unwrap();
        assert_eq!(m.n_episodes, 5);
        let (data, manifest) = split_paths(dir.path(), "train");
        assert_eq!(read_dataset(&data).unwrap(), eps);
        let back = read_manifest(&manifest).unwrap();
        assert_eq!(back, m);
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(manifest).unwrap()).unwrap();
        for key in ["task_table", "d_o", "d_a", "H", "n_episodes", "created_seed"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        append_episode(&data, &eps[0]).unwrap();
        assert_eq!(read_dataset(&data).unwrap().len(), 6);
    }

    proptest! {
        #[test]
        fn bad_source_code_is_rejected(code in 4u8..=255) {
            let e = random_episode(9);
            let mut bytes = encode_episode(&e);
            bytes[9] = code;
            let is_source_err = matches!(decode_episode(&bytes), Err(Error::Decode { field: "source", .. }));
            prop_assert!(is_source_err);
        }
    }
}
