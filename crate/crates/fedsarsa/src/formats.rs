//! Plain-text serialisation of MDPs and policy tables.
//!
//! Both formats start with a magic line, then `key value` dimension lines, then a section
//! keyword followed by whitespace-separated rows. Numbers are written in scientific
//! notation with 17 significant digits so that every `f64` round-trips exactly.
//!
//! ```text
//! fedsarsa-mdp v1
//! states 2
//! actions 2
//! discount 5.0000000000000000e-1
//! reward_cap 1.0000000000000000e0
//! kernel
//! <A·S rows of S probabilities, action-major: row a·S + s is P_a(s, ·)>
//! rewards
//! <S rows of A rewards>
//! ```
//!
//! ```text
//! fedsarsa-policy v1
//! states 2
//! actions 2
//! probabilities
//! <S rows of A probabilities>
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;

use fedsarsa_core::{Mdp, PolicyTable, RewardTable, TransitionKernel};

pub const MDP_MAGIC: &str = "fedsarsa-mdp v1";
pub const POLICY_MAGIC: &str = "fedsarsa-policy v1";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unexpected end of input: {0}")]
    Truncated(String),
    #[error("invalid model: {0}")]
    Model(#[from] fedsarsa_core::Error),
}

fn push_row(out: &mut String, row: &[f64]) {
    for (i, x) in row.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{x:.16e}").unwrap();
    }
    out.push('\n');
}

pub fn mdp_to_string(mdp: &Mdp) -> String {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut out = String::new();
    writeln!(out, "{MDP_MAGIC}").unwrap();
    writeln!(out, "states {ns}").unwrap();
    writeln!(out, "actions {na}").unwrap();
    writeln!(out, "discount {:.16e}", mdp.discount()).unwrap();
    writeln!(out, "reward_cap {:.16e}", mdp.reward_cap()).unwrap();
    out.push_str("kernel\n");
    for row in mdp.kernel().as_slice().chunks_exact(ns) {
        push_row(&mut out, row);
    }
    out.push_str("rewards\n");
    for row in mdp.rewards().as_slice().chunks_exact(na) {
        push_row(&mut out, row);
    }
    out
}

pub fn policy_to_string(policy: &PolicyTable) -> String {
    let mut out = String::new();
    writeln!(out, "{POLICY_MAGIC}").unwrap();
    writeln!(out, "states {}", policy.num_states()).unwrap();
    writeln!(out, "actions {}", policy.num_actions()).unwrap();
    out.push_str("probabilities\n");
    for row in policy.as_slice().chunks_exact(policy.num_actions()) {
        push_row(&mut out, row);
    }
    out
}

/// Line iterator skipping blanks and comments, keeping 1-based line numbers.
struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
        }
    }

    fn next_line(&mut self, expecting: &str) -> Result<(usize, &'a str), FormatError> {
        for (i, raw) in self.inner.by_ref() {
            let line = raw.trim();
            if !line.is_empty() && !line.starts_with('#') {
                return Ok((i + 1, line));
            }
        }
        Err(FormatError::Truncated(format!("expected {expecting}")))
    }

    fn expect_exact(&mut self, token: &str) -> Result<(), FormatError> {
        let (line, text) = self.next_line(token)?;
        if text != token {
            return Err(syntax(line, format!("expected `{token}`, found `{text}`")));
        }
        Ok(())
    }

    fn keyed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, FormatError> {
        let (line, text) = self.next_line(key)?;
        let mut parts = text.split_whitespace();
        if parts.next() != Some(key) {
            return Err(syntax(line, format!("expected `{key} <value>`")));
        }
        let value = parts.next().ok_or_else(|| syntax(line, format!("missing value for `{key}`")))?;
        if parts.next().is_some() {
            return Err(syntax(line, format!("trailing tokens after `{key}`")));
        }
        value
            .parse()
            .map_err(|_| syntax(line, format!("cannot parse `{value}` as the value of `{key}`")))
    }

    fn rows(&mut self, count: usize, width: usize, what: &str, out: &mut Vec<f64>) -> Result<(), FormatError> {
        for _ in 0..count {
            let (line, text) = self.next_line(what)?;
            let start = out.len();
            for token in text.split_whitespace() {
                let x: f64 = token
                    .parse()
                    .map_err(|_| syntax(line, format!("cannot parse `{token}` as a number")))?;
                out.push(x);
            }
            let found = out.len() - start;
            if found != width {
                return Err(syntax(line, format!("{what} row has {found} entries, expected {width}")));
            }
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<(), FormatError> {
        match self.next_line("") {
            Ok((line, _)) => Err(syntax(line, "trailing content")),
            Err(_) => Ok(()),
        }
    }
}

fn syntax(line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Syntax {
        line,
        message: message.into(),
    }
}

pub fn parse_mdp(text: &str) -> Result<Mdp, FormatError> {
    let mut lines = Lines::new(text);
    lines.expect_exact(MDP_MAGIC)?;
    let ns: usize = lines.keyed("states")?;
    let na: usize = lines.keyed("actions")?;
    let discount: f64 = lines.keyed("discount")?;
    let cap: f64 = lines.keyed("reward_cap")?;
    lines.expect_exact("kernel")?;
    let mut probs = Vec::with_capacity(na * ns * ns);
    lines.rows(na * ns, ns, "kernel", &mut probs)?;
    lines.expect_exact("rewards")?;
    let mut rewards = Vec::with_capacity(ns * na);
    lines.rows(ns, na, "reward", &mut rewards)?;
    lines.finish()?;
    let kernel = TransitionKernel::new(ns, na, probs)?;
    let rewards = RewardTable::new(ns, na, cap, rewards)?;
    Ok(Mdp::new(kernel, rewards, discount)?)
}

pub fn parse_policy(text: &str) -> Result<PolicyTable, FormatError> {
    let mut lines = Lines::new(text);
    lines.expect_exact(POLICY_MAGIC)?;
    let ns: usize = lines.keyed("states")?;
    let na: usize = lines.keyed("actions")?;
    lines.expect_exact("probabilities")?;
    let mut probs = Vec::with_capacity(ns * na);
    lines.rows(ns, na, "policy", &mut probs)?;
    lines.finish()?;
    Ok(PolicyTable::new(ns, na, probs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedsarsa_core::build_shifted_mdp;

    #[test]
    fn mdp_round_trip_is_exact() {
        let mdp = build_shifted_mdp(4, 3, 5, 6, 0.3, 7.0).unwrap();
        let text = mdp_to_string(&mdp);
        let back = parse_mdp(&text).unwrap();
        assert_eq!(back, mdp);
        assert_eq!(mdp_to_string(&back), text);
    }

    #[test]
    fn policy_round_trip_is_exact() {
        let p = PolicyTable::new(2, 3, vec![0.1, 0.2, 0.7, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        assert_eq!(parse_policy(&policy_to_string(&p)).unwrap(), p);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let text = "# header\nfedsarsa-policy v1\n\nstates 1\nactions 2\nprobabilities\n0.5 0.5\n";
        assert_eq!(parse_policy(text).unwrap(), PolicyTable::uniform(1, 2));
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let text = "fedsarsa-policy v1\nstates 1\nactions 2\nprobabilities\n0.5 x\n";
        match parse_policy(text) {
            Err(FormatError::Syntax { line: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
        let short = "fedsarsa-policy v1\nstates 1\nactions 2\nprobabilities\n0.5\n";
        assert!(matches!(parse_policy(short), Err(FormatError::Syntax { line: 5, .. })));
        let bad = "fedsarsa-policy v1\nstates 1\nactions 2\nprobabilities\n0.6 0.6\n";
        assert!(matches!(parse_policy(bad), Err(FormatError::Model(_))));
        assert!(matches!(parse_policy("fedsarsa-policy v1\n"), Err(FormatError::Truncated(_))));
    }
}
