//! Puzzle generation, ingestion, augmentation and tokenization.

pub mod arc;
pub mod dihedral;
pub mod maze;
pub mod sudoku;
pub mod vocab;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use dihedral::{dihedral_inverse, dihedral_transform};
pub use vocab::{decode, encode, PAD};

/// Puzzle family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sudoku,
    Maze,
    Arc,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Sudoku => "sudoku",
            Task::Maze => "maze",
            Task::Arc => "arc",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sudoku" => Ok(Task::Sudoku),
            "maze" => Ok(Task::Maze),
            "arc" => Ok(Task::Arc),
            other => Err(Error::Config(format!("unknown task {other}"))),
        }
    }
}

/// Rectangular grid of small cell values, row-major.
///
/// Cell meaning is task specific: sudoku uses 0 for blank and 1..=size for
/// digits, mazes store their token ids directly, ARC stores colors 0..=9.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Grid {
    h: usize,
    w: usize,
    cells: Vec<u8>,
}

impl Grid {
    pub fn new(h: usize, w: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != h * w {
            return Err(Error::Shape(format!("{} cells for a {h}x{w} grid", cells.len())));
        }
        Ok(Grid { h, w, cells })
    }

    pub fn filled(h: usize, w: usize, v: u8) -> Self {
        Grid {
            h,
            w,
            cells: vec![v; h * w],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::Data("ragged grid rows".into()));
        }
        Grid::new(h, w, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.cells[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.cells[r * self.w + c] = v;
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.cells
            .chunks(self.w.max(1))
            .take(self.h)
            .map(<[u8]>::to_vec)
            .collect()
    }

    pub fn map(&self, f: impl Fn(u8) -> u8) -> Grid {
        Grid {
            h: self.h,
            w: self.w,
            cells: self.cells.iter().map(|&c| f(c)).collect(),
        }
    }
}

impl Serialize for Grid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Grid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<u8>>::deserialize(d)?;
        Grid::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// One input/target pair before tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PuzzleInstance {
    pub task: Task,
    pub input: Grid,
    pub target: Grid,
    pub puzzle_id: usize,
    pub augmentation_id: usize,
    /// Top-left placement on the ARC canvas.
    pub offset: (usize, usize),
}

impl PuzzleInstance {
    pub fn new(task: Task, input: Grid, target: Grid) -> Self {
        PuzzleInstance {
            task,
            input,
            target,
            puzzle_id: 0,
            augmentation_id: 0,
            offset: (0, 0),
        }
    }
}

/// Tokenized sample, one line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub task: Task,
    pub puzzle_id: usize,
    pub augmentation_id: usize,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    /// Identifies the original test input an augmented record came from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    /// Maps a predicted grid back to the original orientation and colors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inverse: Option<arc::ArcTransform>,
}

impl Record {
    pub fn from_instance(p: &PuzzleInstance) -> Result<Self> {
        let (input, target) = encode(p)?;
        Ok(Record {
            task: p.task,
            puzzle_id: p.puzzle_id,
            augmentation_id: p.augmentation_id,
            input,
            target,
            group: None,
            inverse: None,
        })
    }

    /// Positions that count towards loss and exact match.
    pub fn mask(&self) -> Vec<bool> {
        self.target.iter().map(|&t| t != PAD).collect()
    }
}

/// Records of one split plus what the model needs to know about them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: Task,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Rows of the puzzle embedding table the records index into.
    pub num_puzzle_ids: usize,
    /// Grid shape for fixed-shape tasks; ARC uses the full canvas.
    pub grid_shape: (usize, usize),
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(
        task: Task,
        grid_shape: (usize, usize),
        vocab_size: usize,
        num_puzzle_ids: usize,
        records: Vec<Record>,
    ) -> Result<Self> {
        let seq_len = grid_shape.0 * grid_shape.1;
        let ds = Dataset {
            task,
            seq_len,
            vocab_size,
            num_puzzle_ids,
            grid_shape,
            records,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.task != self.task {
                return Err(Error::Data(format!(
                    "record {i} is {:?}, dataset is {:?}",
                    r.task, self.task
                )));
            }
            if r.input.len() != self.seq_len || r.target.len() != self.seq_len {
                return Err(Error::Data(format!(
                    "record {i} has {}/{} tokens, expected {}",
                    r.input.len(),
                    r.target.len(),
                    self.seq_len
                )));
            }
            if let Some(&t) = r.input.iter().chain(&r.target).find(|&&t| t >= self.vocab_size) {
                return Err(Error::Vocab(format!(
                    "record {i} has token {t} outside vocab {}",
                    self.vocab_size
                )));
            }
            if r.puzzle_id >= self.num_puzzle_ids.max(1) {
                return Err(Error::Data(format!(
                    "record {i} puzzle id {} outside table of {}",
                    r.puzzle_id, self.num_puzzle_ids
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every record, in order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(serde_json::to_vec(r).expect("record serializes"));
            h.update(b"\n");
        }
        hex_digest(h)
    }

    /// Writes one JSON record per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_records(path: &Path) -> Result<Vec<Record>> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record =
                serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            out.push(r);
        }
        Ok(out)
    }
}

/// Summary written next to the split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: Task,
    pub seed: u64,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub num_puzzle_ids: usize,
    pub grid_shape: (usize, usize),
    pub splits: Vec<SplitInfo>,
    /// Hash of the generation parameters.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub file: String,
    pub count: usize,
    pub sha256: String,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Reads a split and checks it against the recorded hash.
    pub fn load_split(&self, dir: &Path, name: &str) -> Result<Dataset> {
        let info = self
            .splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Data(format!("no split {name} in manifest")))?;
        let records = Dataset::read_records(&dir.join(&info.file))?;
        let ds = Dataset {
            task: self.task,
            seq_len: self.seq_len,
            vocab_size: self.vocab_size,
            num_puzzle_ids: self.num_puzzle_ids,
            grid_shape: self.grid_shape,
            records,
        };
        ds.validate()?;
        if ds.hash() != info.sha256 {
            return Err(Error::Data(format!("split {name} does not match its manifest hash")));
        }
        Ok(ds)
    }
}

/// Writes `splits` as `<name>.jsonl` plus `manifest.json` under `dir`.
///
/// Refuses to overwrite an existing manifest unless `force` is set.
pub fn write_splits(
    dir: &Path,
    seed: u64,
    config_hash: &str,
    splits: &[(&str, &Dataset)],
    force: bool,
) -> Result<Manifest> {
    let first = splits
        .first()
        .ok_or_else(|| Error::Config("no splits to write".into()))?
        .1;
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() && !force {
        return Err(Error::Config(format!(
            "{} exists; pass --force to overwrite",
            manifest_path.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut infos = Vec::new();
    for (name, ds) in splits {
        let file = format!("{name}.jsonl");
        ds.write_jsonl(&dir.join(&file))?;
        infos.push(SplitInfo {
            name: name.to_string(),
            file,
            count: ds.len(),
            sha256: ds.hash(),
        });
    }
    let manifest = Manifest {
        task: first.task,
        seed,
        seq_len: first.seq_len,
        vocab_size: first.vocab_size,
        num_puzzle_ids: splits.iter().map(|(_, d)| d.num_puzzle_ids).max().unwrap_or(1),
        grid_shape: first.grid_shape,
        splits: infos,
        config_hash: config_hash.to_string(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// Lowercase hex of a finished SHA-256.
pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a byte string, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_digest(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let g = Grid::new(2, 2, vec![1, 0, 0, 2]).unwrap();
        let t = Grid::new(2, 2, vec![1, 2, 2, 1]).unwrap();
        let mut recs = Vec::new();
        for id in 0..3 {
            let mut p = PuzzleInstance::new(Task::Sudoku, g.clone(), t.clone());
            p.augmentation_id = id;
            recs.push(Record::from_instance(&p).unwrap());
        }
        Dataset::new(Task::Sudoku, (2, 2), 4, 1, recs).unwrap()
    }

    #[test]
    fn grid_json_is_nested_rows() {
        let g = Grid::new(2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert_eq!(s, "[[1,2,3],[4,5,6]]");
        assert_eq!(serde_json::from_str::<Grid>(&s).unwrap(), g);
        assert!(serde_json::from_str::<Grid>("[[1,2],[3]]").is_err());
    }

    #[test]
    fn splits_round_trip_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        let m = write_splits(dir.path(), 3, "abc", &[("train", &ds)], false).unwrap();
        assert_eq!(m.splits[0].count, 3);
        let back = Manifest::load(dir.path())
            .unwrap()
            .load_split(dir.path(), "train")
            .unwrap();
        assert_eq!(back, ds);
        assert!(write_splits(dir.path(), 3, "abc", &[("train", &ds)], false).is_err());
        assert!(write_splits(dir.path(), 3, "abc", &[("train", &ds)], true).is_ok());
    }

    #[test]
    fn validation_rejects_out_of_vocab() {
        let mut ds = tiny();
        ds.records[1].target[0] = 9;
        assert!(matches!(ds.validate(), Err(Error::Vocab(_))));
    }
}
