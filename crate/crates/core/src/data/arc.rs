//! ARC-style grid tasks: the public JSON task format, joint augmentation,
//! and dataset construction with per-augmentation puzzle ids.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::dihedral::{dihedral_inverse, dihedral_transform};
use crate::data::vocab::{ARC_CANVAS, ARC_VOCAB};
use crate::data::{Dataset, Grid, PuzzleInstance, Record, Task};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArcPair {
    pub input: Grid,
    /// Hidden for some test inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Grid>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArcTask {
    pub id: String,
    pub train: Vec<ArcPair>,
    pub test: Vec<ArcPair>,
}

#[derive(Serialize, Deserialize)]
struct TaskJson {
    train: Vec<ArcPair>,
    test: Vec<ArcPair>,
}

fn check_grid(id: &str, g: &Grid) -> Result<()> {
    let (h, w) = (g.height(), g.width());
    if h == 0 || w == 0 || h > ARC_CANVAS || w > ARC_CANVAS {
        return Err(Error::Data(format!("task {id}: grid {h}x{w} outside 1..=30")));
    }
    if let Some(c) = g.cells().iter().find(|&&c| c > 9) {
        return Err(Error::Data(format!("task {id}: color {c} outside 0..=9")));
    }
    Ok(())
}

impl ArcTask {
    pub fn validate(&self) -> Result<()> {
        for p in &self.train {
            check_grid(&self.id, &p.input)?;
            let out = p
                .output
                .as_ref()
                .ok_or_else(|| Error::Data(format!("task {}: demonstration without output", self.id)))?;
            check_grid(&self.id, out)?;
        }
        for p in &self.test {
            check_grid(&self.id, &p.input)?;
            if let Some(o) = &p.output {
                check_grid(&self.id, o)?;
            }
        }
        Ok(())
    }

    /// Parses one task in the public JSON format.
    pub fn from_json(id: &str, text: &str) -> Result<Self> {
        let raw: TaskJson = serde_json::from_str(text).map_err(|e| Error::Data(format!("task {id}: {e}")))?;
        let task = ArcTask {
            id: id.to_string(),
            train: raw.train,
            test: raw.test,
        };
        task.validate()?;
        Ok(task)
    }

    /// Serializes back to the public JSON format.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&TaskJson {
            train: self.train.clone(),
            test: self.test.clone(),
        })
        .expect("grids serialize")
    }

    fn grids(&self) -> impl Iterator<Item = &Grid> {
        self.train
            .iter()
            .chain(&self.test)
            .flat_map(|p| std::iter::once(&p.input).chain(p.output.as_ref()))
    }
}

/// Loads tasks from a task file, a directory of task files (ids from file
/// stems), or a combined file mapping ids to tasks.
pub fn arc_load(path: &Path) -> Result<Vec<ArcTask>> {
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        return files
            .iter()
            .map(|f| {
                let text = fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
                let id = f.file_stem().unwrap_or_default().to_string_lossy();
                ArcTask::from_json(&id, &text)
            })
            .collect();
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if value.get("train").is_some() {
        let id = path.file_stem().unwrap_or_default().to_string_lossy();
        return Ok(vec![ArcTask::from_json(&id, &text)?]);
    }
    let map: BTreeMap<String, serde_json::Value> = serde_json::from_value(value)
        .map_err(|e| Error::Data(format!("{}: expected a task or a map of tasks: {e}", path.display())))?;
    map.into_iter()
        .map(|(id, v)| ArcTask::from_json(&id, &v.to_string()))
        .collect()
}

/// Color permutation, then a dihedral element, then placement on the canvas.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArcTransform {
    /// `colors[c]` replaces color `c`.
    pub colors: Vec<u8>,
    pub dihedral: u8,
    pub offset: (usize, usize),
}

impl ArcTransform {
    pub fn identity() -> Self {
        ArcTransform {
            colors: (0..10).collect(),
            dihedral: 0,
            offset: (0, 0),
        }
    }

    /// Colors and orientation; placement is applied at encoding time.
    pub fn apply(&self, g: &Grid) -> Grid {
        let recolored = g.map(|c| self.colors[usize::from(c)]);
        dihedral_transform(&recolored, self.dihedral, false).expect("element in range")
    }

    /// Undoes [`ArcTransform::apply`] on a grid already cut from the canvas.
    pub fn invert(&self, g: &Grid) -> Grid {
        let mut inv = [0u8; 10];
        for (c, &to) in self.colors.iter().enumerate() {
            inv[usize::from(to)] = c as u8;
        }
        let turned = dihedral_transform(g, dihedral_inverse(self.dihedral), false).expect("element in range");
        turned.map(|c| inv[usize::from(c.min(9))])
    }

    pub fn apply_task(&self, task: &ArcTask) -> ArcTask {
        let pair = |p: &ArcPair| ArcPair {
            input: self.apply(&p.input),
            output: p.output.as_ref().map(|o| self.apply(o)),
        };
        ArcTask {
            id: task.id.clone(),
            train: task.train.iter().map(pair).collect(),
            test: task.test.iter().map(pair).collect(),
        }
    }
}

/// `count` distinct transforms of a task; the first is the identity.
///
/// One transform is shared by every grid of the task, and the translation
/// keeps the largest transformed grid on the canvas.
pub fn arc_augment(task: &ArcTask, count: usize, seed: u64, permute_background: bool) -> Vec<(ArcTransform, ArcTask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let (mut max_h, mut max_w) = (1, 1);
    for g in task.grids() {
        max_h = max_h.max(g.height());
        max_w = max_w.max(g.width());
    }
    let mut tries = 0usize;
    while out.len() < count {
        let t = if out.is_empty() {
            ArcTransform::identity()
        } else {
            let mut colors: Vec<u8> = (0..10).collect();
            if permute_background {
                colors.shuffle(&mut rng);
            } else {
                colors[1..].shuffle(&mut rng);
            }
            let dihedral = rng.random_range(0..8u8);
            let (h, w) = if dihedral % 2 == 1 {
                (max_w, max_h)
            } else {
                (max_h, max_w)
            };
            let offset = (
                rng.random_range(0..=ARC_CANVAS - h),
                rng.random_range(0..=ARC_CANVAS - w),
            );
            ArcTransform {
                colors,
                dihedral,
                offset,
            }
        };
        tries += 1;
        if seen.insert(t.clone()) || tries > 100 * count {
            let augmented = t.apply_task(task);
            out.push((t, augmented));
        }
    }
    out
}

fn instance(input: &Grid, output: &Grid, t: &ArcTransform, puzzle_id: usize, aug: usize) -> PuzzleInstance {
    PuzzleInstance {
        task: Task::Arc,
        input: input.clone(),
        target: output.clone(),
        puzzle_id,
        augmentation_id: aug,
        offset: t.offset,
    }
}

/// Builds train/test splits.
///
/// Training records are the demonstration pairs of every task (training and
/// evaluation), each augmentation under its own puzzle id. Test records are
/// the labelled test inputs of the evaluation tasks, tagged with their group
/// and inverse transform for voting. Puzzle id 0 is left unused.
pub fn arc_build_dataset(
    train_tasks: &[ArcTask],
    eval_tasks: &[ArcTask],
    augmentations: usize,
    seed: u64,
    permute_background: bool,
) -> Result<(Dataset, Dataset)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut next_id = 1;
    for (ti, task) in train_tasks.iter().chain(eval_tasks).enumerate() {
        let is_eval = ti >= train_tasks.len();
        let augs = arc_augment(
            task,
            augmentations.max(1),
            seed ^ (ti as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            permute_background,
        );
        for (aug, (t, at)) in augs.iter().enumerate() {
            let pid = next_id;
            next_id += 1;
            for p in &at.train {
                let out = p.output.as_ref().expect("validated");
                train.push(Record::from_instance(&instance(&p.input, out, t, pid, aug))?);
            }
            if is_eval {
                for (qi, p) in at.test.iter().enumerate() {
                    let Some(out) = &p.output else { continue };
                    let mut r = Record::from_instance(&instance(&p.input, out, t, pid, aug))?;
                    r.group = Some(format!("{}#{qi}", task.id));
                    r.inverse = Some(t.clone());
                    test.push(r);
                }
            }
        }
    }
    let shape = (ARC_CANVAS, ARC_CANVAS);
    Ok((
        Dataset::new(Task::Arc, shape, ARC_VOCAB, next_id, train)?,
        Dataset::new(Task::Arc, shape, ARC_VOCAB, next_id, test)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::decode;

    const SAMPLE: &str = r#"{"train":[{"input":[[0,1],[2,3]],"output":[[1,0]]},
        {"input":[[5]],"output":[[6,7,8]]},{"input":[[9,9,9]],"output":[[0],[4]]}],
        "test":[{"input":[[1,2,3],[4,5,6]],"output":[[3,2,1]]}]}"#;

    #[test]
    fn parses_counts_and_round_trips() {
        let t = ArcTask::from_json("s", SAMPLE).unwrap();
        assert_eq!((t.train.len(), t.test.len()), (3, 1));
        let again = ArcTask::from_json("s", &t.to_json()).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn rejects_bad_colors_and_sizes() {
        assert!(ArcTask::from_json("x", r#"{"train":[{"input":[[10]],"output":[[1]]}],"test":[]}"#).is_err());
        let wide = format!(
            r#"{{"train":[{{"input":[[{}]],"output":[[1]]}}],"test":[]}}"#,
            vec!["0"; 31].join(",")
        );
        assert!(ArcTask::from_json("x", &wide).is_err());
        assert!(ArcTask::from_json("x", "{not json").is_err());
        assert!(ArcTask::from_json("x", r#"{"train":[{"input":[[1],[1,2]],"output":[[1]]}],"test":[]}"#).is_err());
    }

    #[test]
    fn augmentations_invert_and_get_distinct_ids() {
        let t = ArcTask::from_json("s", SAMPLE).unwrap();
        let augs = arc_augment(&t, 200, 7, false);
        assert_eq!(augs[0].1, t);
        let distinct: HashSet<_> = augs.iter().map(|(tr, _)| tr.clone()).collect();
        assert_eq!(distinct.len(), 200);
        for (tr, at) in &augs {
            assert_eq!(tr.colors[0], 0);
            for (p, q) in at.train.iter().zip(&t.train) {
                assert_eq!(tr.invert(p.output.as_ref().unwrap()), *q.output.as_ref().unwrap());
            }
        }
        let (train, test) = arc_build_dataset(&[], &[t.clone()], 50, 1, false).unwrap();
        assert_eq!(train.len(), 150);
        assert_eq!(test.len(), 50);
        let ids: HashSet<_> = test.records.iter().map(|r| r.puzzle_id).collect();
        assert_eq!(ids.len(), 50);
        for r in &test.records {
            let g = decode(&r.target, Task::Arc, (30, 30)).unwrap();
            assert_eq!(
                r.inverse.as_ref().unwrap().invert(&g),
                *t.test[0].output.as_ref().unwrap()
            );
        }
    }

    #[test]
    fn loads_directory_and_combined_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.json"), SAMPLE).unwrap();
        fs::write(dir.path().join("a.json"), SAMPLE).unwrap();
        let tasks = arc_load(dir.path()).unwrap();
        assert_eq!(tasks.iter().map(|t| t.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        let combined = dir.path().join("all.txt");
        fs::write(&combined, format!(r#"{{"x":{SAMPLE},"y":{SAMPLE}}}"#)).unwrap();
        assert_eq!(arc_load(&combined).unwrap().len(), 2);
    }
}
