//! Trajectory datasets and their line-delimited JSON file format.
//!
//! The first line is a header record
//! `{"num_states":25,"num_actions":5,"generator":"...","seed":42}`, followed by
//! one trajectory per line:
//! `{"states":[..],"actions":[..],"labels":[..],"counters":[..]}` where
//! `labels` and `counters` are optional diagnostics that are never used for
//! training.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    /// Ground-truth intention per step, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    /// Hidden frustration counter per step, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counters: Option<Vec<u32>>,
}

impl Trajectory {
    pub fn new(states: Vec<usize>, actions: Vec<usize>) -> Self {
        Self {
            states,
            actions,
            labels: None,
            counters: None,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.states.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn steps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.states.iter().copied().zip(self.actions.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    num_states: usize,
    num_actions: usize,
    #[serde(default)]
    generator: String,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryDataset {
    pub num_states: usize,
    pub num_actions: usize,
    pub trajectories: Vec<Trajectory>,
    pub generator: String,
    pub seed: Option<u64>,
}

impl TrajectoryDataset {
    pub fn new(num_states: usize, num_actions: usize, trajectories: Vec<Trajectory>) -> Self {
        Self {
            num_states,
            num_actions,
            trajectories,
            generator: String::new(),
            seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn has_labels(&self) -> bool {
        !self.trajectories.is_empty() && self.trajectories.iter().all(|t| t.labels.is_some())
    }

    /// Subset by trajectory index, keeping metadata.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            num_states: self.num_states,
            num_actions: self.num_actions,
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
            generator: self.generator.clone(),
            seed: self.seed,
        }
    }

    /// Checks shapes and index bounds.
    pub fn validate(&self) -> Result<()> {
        for (ti, t) in self.trajectories.iter().enumerate() {
            check_trajectory(t, self.num_states, self.num_actions)
                .map_err(|msg| Error::Bounds(format!("trajectory {ti}: {msg}")))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = Header {
            num_states: self.num_states,
            num_actions: self.num_actions,
            generator: self.generator.clone(),
            seed: self.seed,
        };
        serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for t in &self.trajectories {
            serde_json::to_writer(&mut w, t).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path)?);
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut header: Option<Header> = None;
        let mut trajectories = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            match &header {
                None => {
                    header = Some(
                        serde_json::from_str(&line)
                            .map_err(|e| parse_err(lineno, format!("bad header: {e}")))?,
                    )
                }
                Some(h) => {
                    let t: Trajectory = serde_json::from_str(&line)
                        .map_err(|e| parse_err(lineno, e.to_string()))?;
                    if let Err(msg) = check_trajectory(&t, h.num_states, h.num_actions) {
                        return Err(Error::Bounds(format!("{}:{lineno}: {msg}", path.display())));
                    }
                    trajectories.push(t);
                }
            }
        }
        let header = header.ok_or_else(|| parse_err(1, "missing header record".into()))?;
        Ok(Self {
            num_states: header.num_states,
            num_actions: header.num_actions,
            trajectories,
            generator: header.generator,
            seed: header.seed,
        })
    }
}

fn check_trajectory(t: &Trajectory, ns: usize, na: usize) -> std::result::Result<(), String> {
    if t.states.len() != t.actions.len() {
        return Err(format!(
            "{} states but {} actions",
            t.states.len(),
            t.actions.len()
        ));
    }
    if t.states.is_empty() {
        return Err("empty trajectory".into());
    }
    if let Some(&s) = t.states.iter().find(|&&s| s >= ns) {
        return Err(format!("state {s} >= num_states {ns}"));
    }
    if let Some(&a) = t.actions.iter().find(|&&a| a >= na) {
        return Err(format!("action {a} >= num_actions {na}"));
    }
    if t.labels.as_ref().is_some_and(|l| l.len() != t.len()) {
        return Err("labels length differs from trajectory length".into());
    }
    if t.counters.as_ref().is_some_and(|c| c.len() != t.len()) {
        return Err("counters length differs from trajectory length".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrajectoryDataset {
        let mut t = Trajectory::new(vec![0, 1, 2], vec![1, 1, 0]);
        t.labels = Some(vec![0, 0, 1]);
        t.counters = Some(vec![0, 1, 0]);
        let mut d = TrajectoryDataset::new(3, 2, vec![t, Trajectory::new(vec![2], vec![1])]);
        d.generator = "unit".into();
        d.seed = Some(7);
        d
    }

    #[test]
    fn save_then_load_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let d = sample();
        d.save(&path).unwrap();
        assert_eq!(TrajectoryDataset::load(&path).unwrap(), d);
    }

    #[test]
    fn action_index_equal_to_num_actions_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"num_states\":3,\"num_actions\":2}\n{\"states\":[0],\"actions\":[2]}\n",
        )
        .unwrap();
        let err = TrajectoryDataset::load(&path).unwrap_err();
        assert!(matches!(err, Error::Bounds(_)), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"num_states\":3,\"num_actions\":2}\n{\"states\":[0],\"actions\":[1]}\n{oops\n",
        )
        .unwrap();
        match TrajectoryDataset::load(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"num_states\":3,\"num_actions\":2}\n{\"states\":[0],\"actions\":[1],\"extra\":1}\n",
        )
        .unwrap();
        assert!(TrajectoryDataset::load(&path).is_err());
    }
}
