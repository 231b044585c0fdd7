use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// One token of an architecture string such as `c256-mo-c256-f4096-f4096-f21`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NocToken {
    /// 3x3 convolution (padding 1) with this many output channels, then ReLU.
    Conv(usize),
    /// Element-wise max over the two scale pathways.
    Maxout,
    /// Fully-connected layer of this width; ReLU unless it is the last.
    Fc(usize),
}

impl fmt::Display for NocToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NocToken::Conv(c) => write!(f, "c{c}"),
            NocToken::Maxout => f.write_str("mo"),
            NocToken::Fc(w) => write!(f, "f{w}"),
        }
    }
}

impl FromStr for NocToken {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        if s == "mo" {
            return Ok(NocToken::Maxout);
        }
        let (kind, digits) = s.split_at(s.chars().next().map_or(0, char::len_utf8));
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(());
        }
        let n: usize = digits.parse().map_err(|_| ())?;
        if n == 0 {
            return Err(());
        }
        match kind {
            "c" => Ok(NocToken::Conv(n)),
            "f" => Ok(NocToken::Fc(n)),
            _ => Err(()),
        }
    }
}

/// Parse failures; positions are 1-based token indices.
#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("empty architecture string")]
    Empty,
    #[error("unknown token {token:?} at position {position}")]
    UnknownToken { position: usize, token: String },
    #[error("second 'mo' at position {position}; at most one maxout is allowed")]
    MultipleMaxout { position: usize },
    #[error("conv token at position {position} follows a fully-connected layer")]
    ConvAfterFc { position: usize },
    #[error("no fully-connected layer; the last layer must be f{expected}")]
    NoFc { expected: usize },
    #[error("final fc at position {position} has width {found}, expected {expected} (categories + background)")]
    FinalWidth {
        position: usize,
        expected: usize,
        found: usize,
    },
}

/// A validated architecture string.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NocSpec {
    tokens: Vec<NocToken>,
}

impl NocSpec {
    pub fn tokens(&self) -> &[NocToken] {
        &self.tokens
    }

    /// Conv and fc tokens in order; maxout removed.
    pub fn layers(&self) -> impl Iterator<Item = NocToken> + '_ {
        self.tokens
            .iter()
            .copied()
            .filter(|t| *t != NocToken::Maxout)
    }

    pub fn num_layers(&self) -> usize {
        self.layers().count()
    }

    pub fn num_fc(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| matches!(t, NocToken::Fc(_)))
            .count()
    }

    pub fn num_conv(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| matches!(t, NocToken::Conv(_)))
            .count()
    }

    /// Number of layers applied separately to each pathway before the max,
    /// or `None` without maxout.
    pub fn maxout_position(&self) -> Option<usize> {
        self.tokens.iter().position(|t| *t == NocToken::Maxout)
    }

    pub fn has_maxout(&self) -> bool {
        self.maxout_position().is_some()
    }

    /// Same spec without its maxout token.
    pub fn without_maxout(&self) -> NocSpec {
        NocSpec {
            tokens: self.layers().collect(),
        }
    }

    pub fn output_width(&self) -> usize {
        match self.layers().last() {
            Some(NocToken::Fc(w)) => w,
            _ => unreachable!("validated spec ends with fc"),
        }
    }
}

impl fmt::Display for NocSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Parses a `-`-separated architecture string. The last fc token must have
/// width `n_categories + 1`.
pub fn parse_spec(text: &str, n_categories: usize) -> Result<NocSpec, SpecError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(SpecError::Empty);
    }
    let mut tokens = Vec::new();
    let mut seen_fc = false;
    let mut seen_mo = false;
    for (i, raw) in text.split('-').enumerate() {
        let position = i + 1;
        let token: NocToken = raw.parse().map_err(|_| SpecError::UnknownToken {
            position,
            token: raw.to_string(),
        })?;
        match token {
            NocToken::Maxout if seen_mo => return Err(SpecError::MultipleMaxout { position }),
            NocToken::Maxout => seen_mo = true,
            NocToken::Conv(_) if seen_fc => return Err(SpecError::ConvAfterFc { position }),
            NocToken::Conv(_) => {}
            NocToken::Fc(_) => seen_fc = true,
        }
        tokens.push(token);
    }
    let expected = n_categories + 1;
    let (position, last_fc) = tokens
        .iter()
        .enumerate()
        .rev()
        .find_map(|(i, t)| match t {
            NocToken::Fc(w) => Some((i + 1, *w)),
            _ => None,
        })
        .ok_or(SpecError::NoFc { expected })?;
    if last_fc != expected {
        return Err(SpecError::FinalWidth {
            position,
            expected,
            found: last_fc,
        });
    }
    Ok(NocSpec { tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use NocToken::*;

    #[test]
    fn three_fc() {
        let s = parse_spec("f4096-f4096-f21", 20).unwrap();
        assert_eq!(s.tokens(), &[Fc(4096), Fc(4096), Fc(21)]);
        assert!(!s.has_maxout());
    }

    #[test]
    fn maxout_after_first_conv() {
        let s = parse_spec("c256-mo-c256-f4096-f4096-f21", 20).unwrap();
        assert_eq!(s.tokens()[1], Maxout);
        assert_eq!(s.maxout_position(), Some(1));
        assert_eq!(s.without_maxout().to_string(), "c256-c256-f4096-f4096-f21");
    }

    #[test]
    fn table_three_placements() {
        for (text, pos) in [
            ("mo-c256-c256-f4096-f4096-f21", 0),
            ("c256-mo-c256-f4096-f4096-f21", 1),
            ("c256-c256-f4096-mo-f4096-f21", 3),
            ("c256-c256-f4096-f4096-f21-mo", 5),
        ] {
            assert_eq!(
                parse_spec(text, 20).unwrap().maxout_position(),
                Some(pos),
                "{text}"
            );
        }
    }

    #[test]
    fn errors_carry_positions() {
        assert_eq!(
            parse_spec("f4096-x9", 20),
            Err(SpecError::UnknownToken {
                position: 2,
                token: "x9".into()
            })
        );
        assert_eq!(
            parse_spec("mo-f4096-mo-f21", 20),
            Err(SpecError::MultipleMaxout { position: 3 })
        );
        assert_eq!(
            parse_spec("f4096-c256-f21", 20),
            Err(SpecError::ConvAfterFc { position: 2 })
        );
        assert_eq!(
            parse_spec("f4096-f4096-f20", 20),
            Err(SpecError::FinalWidth {
                position: 3,
                expected: 21,
                found: 20
            })
        );
        assert_eq!(
            parse_spec("c8-mo", 20),
            Err(SpecError::NoFc { expected: 21 })
        );
        assert_eq!(parse_spec("  ", 20), Err(SpecError::Empty));
        assert!(matches!(
            parse_spec("f0-f21", 20),
            Err(SpecError::UnknownToken { position: 1, .. })
        ));
        assert!(matches!(
            parse_spec("f21-", 20),
            Err(SpecError::UnknownToken { position: 2, .. })
        ));
        assert!(matches!(
            parse_spec("f+21", 20),
            Err(SpecError::UnknownToken { .. })
        ));
    }

    fn spec_strategy() -> impl Strategy<Value = String> {
        (
            prop::collection::vec(1usize..600, 0..4),
            prop::collection::vec(1usize..5000, 0..3),
            1usize..30,
            any::<prop::sample::Index>(),
            any::<bool>(),
        )
            .prop_map(|(convs, fcs, n, mo_at, with_mo)| {
                let mut toks: Vec<String> = convs.iter().map(|c| format!("c{c}")).collect();
                toks.extend(fcs.iter().map(|f| format!("f{f}")));
                toks.push(format!("f{}", n + 1));
                if with_mo {
                    let at = mo_at.index(toks.len() + 1);
                    toks.insert(at, "mo".into());
                }
                format!("{}|{}", toks.join("-"), n)
            })
    }

    proptest! {
        #[test]
        fn render_round_trip(input in spec_strategy()) {
            let (text, n) = input.split_once('|').unwrap();
            let spec = parse_spec(text, n.parse().unwrap()).unwrap();
            prop_assert_eq!(spec.to_string(), text);
        }
    }
}
