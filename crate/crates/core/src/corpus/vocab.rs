use crate::error::{Error, Result};
use crate::pipeline::PREFIX_INSTRUCTION;

pub type TokenId = u32;

/// One-character-per-token vocabulary of the synthetic arithmetic task.
///
/// | ids  | symbols                    |
/// |------|----------------------------|
/// | 0-9  | digits                     |
/// | 10   | `+`                        |
/// | 11   | `-` (also accepts `−`)     |
/// | 12   | `=`                        |
/// | 13   | `;`                        |
/// | 14   | `?`                        |
/// | 15   | `A` answer marker          |
/// | 16   | `E` end marker             |
/// | 17   | `T` prefix-instruction     |
///
/// `T` stands for the whole prefix-tuning instruction sentence so templated
/// prompts stay inside the vocabulary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SyntheticVocab;

impl SyntheticVocab {
    pub const SIZE: usize = 18;
    pub const PLUS: TokenId = 10;
    pub const MINUS: TokenId = 11;
    pub const EQUALS: TokenId = 12;
    pub const SEP: TokenId = 13;
    pub const QUERY: TokenId = 14;
    pub const ANSWER: TokenId = 15;
    pub const END: TokenId = 16;
    pub const INSTRUCTION: TokenId = 17;

    pub fn symbol(self, id: TokenId) -> Option<char> {
        Some(match id {
            0..=9 => char::from_digit(id, 10)?,
            Self::PLUS => '+',
            Self::MINUS => '-',
            Self::EQUALS => '=',
            Self::SEP => ';',
            Self::QUERY => '?',
            Self::ANSWER => 'A',
            Self::END => 'E',
            Self::INSTRUCTION => 'T',
            _ => return None,
        })
    }

    pub fn id_of(self, c: char) -> Option<TokenId> {
        Some(match c {
            '0'..='9' => c.to_digit(10)?,
            '+' => Self::PLUS,
            '-' | '−' => Self::MINUS,
            '=' => Self::EQUALS,
            ';' => Self::SEP,
            '?' => Self::QUERY,
            'A' => Self::ANSWER,
            'E' => Self::END,
            'T' => Self::INSTRUCTION,
            _ => return None,
        })
    }

    /// Whitespace is ignored; each occurrence of the prefix instruction
    /// sentence becomes a single `T` token.
    pub fn encode(self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::with_capacity(text.len());
        for (i, piece) in text.split(PREFIX_INSTRUCTION).enumerate() {
            if i > 0 {
                out.push(Self::INSTRUCTION);
            }
            for c in piece.chars().filter(|c| !c.is_whitespace()) {
                let id = self.id_of(c).ok_or_else(|| Error::Data {
                    item: format!("{text:?}"),
                    message: format!("character {c:?} is outside the synthetic vocabulary"),
                })?;
                out.push(id);
            }
        }
        Ok(out)
    }

    /// Canonical rendering: symbols separated by single spaces.
    pub fn decode(self, tokens: &[TokenId]) -> String {
        let mut out = String::with_capacity(tokens.len() * 2);
        for (i, &t) in tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            match t {
                Self::INSTRUCTION => out.push_str(PREFIX_INSTRUCTION),
                _ => match self.symbol(t) {
                    Some(c) => out.push(c),
                    None => out.push_str(&format!("<{t}>")),
                },
            }
        }
        out
    }
}
