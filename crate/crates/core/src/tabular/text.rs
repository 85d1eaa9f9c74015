//! Plain-text serialization of robust MDP instances.
//!
//! Format `drsac-rmdp v1`: a header line with dimensions and scalars, then
//! one reward row per state, then one transition row per `(state, action)`
//! pair in state-major order. Floats are written with 17 significant digits,
//! which round-trips every f64 exactly.
//!
//! ```text
//! drsac-rmdp v1 <n_states> <n_actions> <gamma> <delta> <alpha> <r_max>
//! <reward[s][0]> ... <reward[s][A-1]>           (n_states lines)
//! <p[s][a][0]> ... <p[s][a][S-1]>               (n_states*n_actions lines)
//! ```

use super::{TabularError, TabularRmdp};
use std::path::Path;

const MAGIC: &str = "drsac-rmdp";
const VERSION: &str = "v1";

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

impl TabularRmdp {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{MAGIC} {VERSION} {} {} {} {} {} {}\n",
            self.n_states(),
            self.n_actions(),
            fmt(self.gamma()),
            fmt(self.delta()),
            fmt(self.alpha()),
            fmt(self.r_max()),
        ));
        for row in self.reward() {
            let cells: Vec<String> = row.iter().map(|&x| fmt(x)).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        for s in 0..self.n_states() {
            for a in 0..self.n_actions() {
                let cells: Vec<String> =
                    self.transitions()[s][a].iter().map(|&x| fmt(x)).collect();
                out.push_str(&cells.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TabularError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| TabularError::Format("empty input".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 8 || fields[0] != MAGIC {
            return Err(TabularError::Format(format!("bad header: {header:?}")));
        }
        if fields[1] != VERSION {
            return Err(TabularError::Format(format!(
                "unsupported version {:?}",
                fields[1]
            )));
        }
        let n_states: usize = parse(fields[2], "n_states")?;
        let n_actions: usize = parse(fields[3], "n_actions")?;
        let gamma: f64 = parse(fields[4], "gamma")?;
        let delta: f64 = parse(fields[5], "delta")?;
        let alpha: f64 = parse(fields[6], "alpha")?;
        let r_max: f64 = parse(fields[7], "r_max")?;

        let mut reward = Vec::with_capacity(n_states);
        for s in 0..n_states {
            reward.push(parse_row(lines.next(), n_actions, &format!("reward[{s}]"))?);
        }
        let mut transitions = Vec::with_capacity(n_states);
        for s in 0..n_states {
            let mut per_action = Vec::with_capacity(n_actions);
            for a in 0..n_actions {
                per_action.push(parse_row(
                    lines.next(),
                    n_states,
                    &format!("transitions[{s}][{a}]"),
                )?);
            }
            transitions.push(per_action);
        }
        if lines.next().is_some() {
            return Err(TabularError::Format("trailing content".into()));
        }
        Self::new(reward, transitions, gamma, delta, alpha, r_max)
    }

    pub fn save(&self, path: &Path) -> Result<(), TabularError> {
        std::fs::write(path, self.to_text())
            .map_err(|e| TabularError::Format(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TabularError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TabularError::Format(format!("reading {}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

fn parse<T: std::str::FromStr>(field: &str, name: &str) -> Result<T, TabularError> {
    field
        .parse()
        .map_err(|_| TabularError::Format(format!("cannot parse {name} from {field:?}")))
}

fn parse_row(line: Option<&str>, width: usize, name: &str) -> Result<Vec<f64>, TabularError> {
    let line = line.ok_or_else(|| TabularError::Format(format!("missing row {name}")))?;
    let row: Result<Vec<f64>, _> = line.split_whitespace().map(|c| c.parse::<f64>()).collect();
    let row = row.map_err(|_| TabularError::Format(format!("bad number in {name}: {line:?}")))?;
    if row.len() != width {
        return Err(TabularError::Format(format!(
            "{name} has {} cells, expected {width}",
            row.len()
        )));
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::random_rmdp;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bitwise_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let rmdp = random_rmdp(&mut rng, 5, 3, 0.3);
            let text = rmdp.to_text();
            let back = TabularRmdp::from_text(&text).unwrap();
            assert_eq!(rmdp, back);
            // And the text itself is a fixed point of the round trip.
            assert_eq!(text, back.to_text());
        }
    }

    #[test]
    fn rejects_malformed_inputs() {
        assert!(TabularRmdp::from_text("").is_err());
        assert!(TabularRmdp::from_text("other-header v1 1 1 0.5 0.1 0.1 1.0").is_err());
        assert!(TabularRmdp::from_text("drsac-rmdp v9 1 1 0.5 0.1 0.1 1.0").is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let text = random_rmdp(&mut rng, 2, 2, 0.1).to_text();
        // Truncate the last transition row.
        let truncated: Vec<&str> = text.lines().collect();
        let truncated = truncated[..truncated.len() - 1].join("\n");
        assert!(TabularRmdp::from_text(&truncated).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rmdp");
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let rmdp = random_rmdp(&mut rng, 3, 2, 0.2);
        rmdp.save(&path).unwrap();
        assert_eq!(TabularRmdp::load(&path).unwrap(), rmdp);
    }
}
