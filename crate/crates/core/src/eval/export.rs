//! Plot-ready reward maps, one tab-separated file per intention.
//!
//! Header: `state  r_0 .. r_{A-1}  value  greedy  confidence`, one row per
//! state. `value` is `max_a Q(s,a)`, `greedy` the lowest-index argmax and
//! `confidence` the gap between the two largest Boltzmann probabilities.
//! Floats use the shortest representation that parses back to the same bits.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::em::EmState;
use crate::linalg::Matrix;
use crate::mdp::RewardTable;
use crate::{Error, Result};

/// One parsed row of an exported map.
#[derive(Debug, Clone, PartialEq)]
pub struct MapRow {
    pub state: usize,
    pub rewards: Vec<f64>,
    pub value: f64,
    pub greedy: usize,
    pub confidence: f64,
}

pub fn export_maps(state: &EmState, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for k in 0..state.num_intentions() {
        let r = state.rewards.reward(k);
        let q = state.rewards.q(k);
        let values = q.state_values();
        let greedy = q.greedy_actions();
        let conf = state.rewards.policy(k).action_confidence();
        let na = r.num_actions();
        let mut text = String::from("state");
        for a in 0..na {
            write!(text, "\tr_{a}").unwrap();
        }
        text.push_str("\tvalue\tgreedy\tconfidence\n");
        for s in 0..r.num_states() {
            write!(text, "{s}").unwrap();
            for v in r.row(s) {
                write!(text, "\t{v:?}").unwrap();
            }
            writeln!(text, "\t{:?}\t{}\t{:?}", values[s], greedy[s], conf[s]).unwrap();
        }
        let path = out_dir.join(format!("intention_{k}.tsv"));
        std::fs::write(&path, text)?;
        paths.push(path);
    }
    Ok(paths)
}

fn parse_rows(path: &Path) -> Result<Vec<MapRow>> {
    let text = std::fs::read_to_string(path)?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 5 || cols[0] != "state" || cols[cols.len() - 3..] != ["value", "greedy", "confidence"] {
        return Err(err(1, format!("unexpected header {header:?}")));
    }
    let na = cols.len() - 4;
    let mut rows = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != cols.len() {
            return Err(err(i + 1, format!("expected {} fields, found {}", cols.len(), f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(i + 1, e.to_string()));
        let int = |s: &str| s.parse::<usize>().map_err(|e| err(i + 1, e.to_string()));
        rows.push(MapRow {
            state: int(f[0])?,
            rewards: f[1..=na].iter().map(|s| num(s)).collect::<Result<_>>()?,
            value: num(f[na + 1])?,
            greedy: int(f[na + 2])?,
            confidence: num(f[na + 3])?,
        });
    }
    Ok(rows)
}

/// Reads the reward columns of an exported map back into a table.
pub fn load_reward_map(path: impl AsRef<Path>) -> Result<(RewardTable, Vec<MapRow>)> {
    let rows = parse_rows(path.as_ref())?;
    let na = rows.first().map_or(0, |r| r.rewards.len());
    let mut m = Matrix::zeros(rows.len(), na);
    for (s, row) in rows.iter().enumerate() {
        if row.state != s {
            return Err(Error::Parse {
                path: path.as_ref().to_path_buf(),
                line: s + 2,
                msg: format!("expected state {s}, found {}", row.state),
            });
        }
        m.row_mut(s).copy_from_slice(&row.rewards);
    }
    Ok((RewardTable(m), rows))
}
