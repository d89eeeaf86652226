#[cfg(test)]
use core::ops::Range;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Keyword {
    Def,
    Lemma,
    Proof,
    Qed,
    Check,
    Delay,
    Abort,
    Use,
    True,
    False,
}

impl Keyword {
    fn from_word(word: &str) -> Option<Self> {
        Some(match word {
            "def" => Keyword::Def,
            "lemma" => Keyword::Lemma,
            "proof" => Keyword::Proof,
            "qed" => Keyword::Qed,
            "check" => Keyword::Check,
            "delay" => Keyword::Delay,
            "abort" => Keyword::Abort,
            "use" => Keyword::Use,
            "true" => Keyword::True,
            "false" => Keyword::False,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Sym {
    Colon,
    Dot,
    Eq,
    Lt,
    Le,
    Plus,
    Star,
    LParen,
    RParen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Tok<'a> {
    Kw(Keyword),
    Ident(&'a str),
    Nat(&'a str),
    Sym(Sym),
    Invalid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Token<'a> {
    pub tok: Tok<'a>,
    pub start: usize,
    pub end: usize,
}

#[cfg(test)]
impl Token<'_> {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// Splits `src` into tokens. Never fails: characters outside the grammar
/// become `Invalid` tokens for the parser to reject.
pub(crate) fn tokenize(src: &str) -> alloc::vec::Vec<Token<'_>> {
    let bytes = src.as_bytes();
    let mut out = alloc::vec::Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if b == b'-' && bytes.get(i + 1) == Some(&b'-') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        let tok = match b {
            b'a'..=b'z' => {
                while i < bytes.len() && matches!(bytes[i], b'a'..=b'z' | b'0'..=b'9' | b'_') {
                    i += 1;
                }
                let word = &src[start..i];
                out.push(Token {
                    tok: Keyword::from_word(word).map_or(Tok::Ident(word), Tok::Kw),
                    start,
                    end: i,
                });
                continue;
            }
            b'0'..=b'9' => {
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                out.push(Token { tok: Tok::Nat(&src[start..i]), start, end: i });
                continue;
            }
            b':' => Tok::Sym(Sym::Colon),
            b'.' => Tok::Sym(Sym::Dot),
            b'=' => Tok::Sym(Sym::Eq),
            b'<' if bytes.get(i + 1) == Some(&b'=') => {
                i += 1;
                Tok::Sym(Sym::Le)
            }
            b'<' => Tok::Sym(Sym::Lt),
            b'+' => Tok::Sym(Sym::Plus),
            b'*' => Tok::Sym(Sym::Star),
            b'(' => Tok::Sym(Sym::LParen),
            b')' => Tok::Sym(Sym::RParen),
            _ => {
                // Skip the whole (possibly multi-byte) character.
                let ch_len = src[i..].chars().next().map_or(1, char::len_utf8);
                i += ch_len - 1;
                Tok::Invalid
            }
        };
        i += 1;
        out.push(Token { tok, start, end: i });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keywords_identifiers_and_comments() {
        let toks = tokenize("def ab_1 = 12 -- note\n . <= <");
        let kinds: alloc::vec::Vec<_> = toks.iter().map(|t| t.tok).collect();
        assert_eq!(
            kinds,
            [
                Tok::Kw(Keyword::Def),
                Tok::Ident("ab_1"),
                Tok::Sym(Sym::Eq),
                Tok::Nat("12"),
                Tok::Sym(Sym::Dot),
                Tok::Sym(Sym::Le),
                Tok::Sym(Sym::Lt),
            ]
        );
        assert_eq!(toks[1].range(), 4..8);
    }

    #[test]
    fn foreign_characters_are_single_invalid_tokens() {
        let toks = tokenize("Aé-");
        assert_eq!(toks.len(), 3);
        assert!(toks.iter().all(|t| t.tok == Tok::Invalid));
        assert_eq!(toks[1].range(), 1..3);
    }
}
