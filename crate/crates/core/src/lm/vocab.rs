use std::collections::HashMap;

use serde::Deserialize;

use super::{LmError, TokenId};

/// Splits text into word pieces: each piece is a run of non-whitespace
/// together with the whitespace that precedes it. Trailing whitespace at the
/// end of the text belongs to no piece.
///
/// `"a b c"` gives `["a", " b", " c"]`.
pub fn split_pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut in_word = false;
    for (i, ch) in text.char_indices() {
        let ws = ch.is_whitespace();
        if in_word && ws {
            out.push(&text[start..i]);
            start = i;
            in_word = false;
        } else if !ws {
            in_word = true;
        }
    }
    if in_word {
        out.push(&text[start..]);
    }
    out
}

/// Decoded vocabulary with optional reserved unknown and end-of-sequence ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, TokenId>,
    unk: Option<TokenId>,
    eos: Option<TokenId>,
}

pub const UNK_PIECE: &str = "<unk>";
pub const EOS_PIECE: &str = "<eos>";

impl Vocabulary {
    /// Plain vocabulary with no reserved ids. Later duplicates are ignored
    /// for lookup but still occupy their id.
    pub fn new<S: Into<String>>(pieces: impl IntoIterator<Item = S>) -> Self {
        let pieces: Vec<String> = pieces.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            index.entry(p.clone()).or_insert(TokenId(i as u32));
        }
        let unk = index.get(UNK_PIECE).copied();
        let eos = index.get(EOS_PIECE).copied();
        Self { pieces, index, unk, eos }
    }

    /// Vocabulary with `<unk>` at id 0 and `<eos>` at id 1, followed by `pieces`.
    pub fn with_specials<S: Into<String>>(pieces: impl IntoIterator<Item = S>) -> Self {
        let mut all = vec![UNK_PIECE.to_string(), EOS_PIECE.to_string()];
        all.extend(pieces.into_iter().map(Into::into));
        Self::new(all)
    }

    /// Reads either a JSON array of decoded pieces or a `{piece: id}` map.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            List(Vec<String>),
            Map(HashMap<String, u32>),
        }
        Ok(match serde_json::from_str::<Repr>(text)? {
            Repr::List(pieces) => Self::new(pieces),
            Repr::Map(map) => {
                let size = map.values().map(|&v| v as usize + 1).max().unwrap_or(0);
                let mut pieces = vec![String::new(); size];
                for (piece, id) in map {
                    pieces[id as usize] = piece;
                }
                Self::new(pieces)
            }
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: TokenId) -> Option<&str> {
        self.pieces.get(id.index()).map(String::as_str)
    }

    pub fn pieces(&self) -> impl Iterator<Item = (TokenId, &str)> {
        self.pieces.iter().enumerate().map(|(i, p)| (TokenId(i as u32), p.as_str()))
    }

    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.index.get(piece).copied()
    }

    pub fn unk(&self) -> Option<TokenId> {
        self.unk
    }

    pub fn eos(&self) -> Option<TokenId> {
        self.eos
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        split_pieces(text)
            .into_iter()
            .map(|p| {
                self.id(p).or(self.unk).ok_or_else(|| {
                    LmError::InvalidRequest(format!("piece {p:?} not in vocabulary and no <unk> id"))
                })
            })
            .collect()
    }

    pub fn count(&self, text: &str) -> usize {
        split_pieces(text).len()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, LmError> {
        ids.iter()
            .map(|&id| self.piece(id).ok_or(LmError::UnknownToken(id.0)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pieces_keep_leading_whitespace() {
        assert_eq!(split_pieces("a b c"), vec!["a", " b", " c"]);
        assert_eq!(split_pieces("  x\n\ty  "), vec!["  x", "\n\ty"]);
        assert!(split_pieces("").is_empty());
        assert!(split_pieces("   ").is_empty());
    }

    #[test]
    fn counts_match_mock_tokenizer_examples() {
        let v = Vocabulary::with_specials(["a", " b", " c"]);
        assert_eq!(v.count(""), 0);
        assert_eq!(v.count("a b c"), 3);
    }

    #[test]
    fn unknown_pieces_map_to_unk() {
        let v = Vocabulary::with_specials(["a"]);
        assert_eq!(v.tokenize("a zz").unwrap(), vec![TokenId(2), TokenId(0)]);
        let plain = Vocabulary::new(["a"]);
        assert!(plain.tokenize("zz").is_err());
    }

    #[test]
    fn decode_inverts_tokenize_up_to_trailing_whitespace() {
        let text = "def f(x):\n    return x\n";
        let v = Vocabulary::with_specials(split_pieces(text));
        let ids = v.tokenize(text).unwrap();
        assert_eq!(v.decode(&ids).unwrap(), text.trim_end());
    }

    #[test]
    fn loads_list_and_map_forms() {
        let a = Vocabulary::from_json(r#"["x", " y"]"#).unwrap();
        assert_eq!(a.id(" y"), Some(TokenId(1)));
        let b = Vocabulary::from_json(r#"{"x": 1, "y": 0}"#).unwrap();
        assert_eq!(b.piece(TokenId(1)), Some("x"));
    }

    // Brute force over short strings from a tiny alphabet: concatenation never
    // creates pieces, and whitespace at the join keeps counts additive.
    #[test]
    fn count_is_subadditive_over_concatenation() {
        let alphabet = ['a', 'b', ' ', '\n'];
        let mut strings = vec![String::new()];
        for _ in 0..3 {
            let prev = strings.clone();
            for s in prev {
                for c in alphabet {
                    let mut t = s.clone();
                    t.push(c);
                    if !strings.contains(&t) {
                        strings.push(t);
                    }
                }
            }
        }
        let v = Vocabulary::new(Vec::<String>::new());
        for a in &strings {
            for b in &strings {
                let joined = format!("{a}{b}");
                let sum = v.count(a) + v.count(b);
                assert!(v.count(&joined) <= sum, "{a:?} + {b:?}");
                let ws_boundary = a.is_empty()
                    || b.is_empty()
                    || a.ends_with(char::is_whitespace)
                    || b.starts_with(char::is_whitespace);
                if ws_boundary {
                    assert_eq!(v.count(&joined), sum, "{a:?} + {b:?}");
                }
            }
        }
    }
}
