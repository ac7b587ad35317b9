//! Closed vocabulary for captions and referring phrases.

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];

const FUNCTION_WORDS: [&str; 5] = ["a", "and", "the", "left", "right"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        let words = ["<pad>", "<bos>", "<eos>"]
            .into_iter()
            .chain(FUNCTION_WORDS)
            .chain(COLORS)
            .chain(SHAPES)
            .map(String::from)
            .collect();
        Self { words }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Vocabulary(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocabulary(format!("id {id}")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        Ok(ids.iter().map(|&i| self.word(i)).collect::<Result<Vec<_>>>()?.join(" "))
    }

    pub fn color_id(&self, color: usize) -> usize {
        self.id(COLORS[color]).expect("palette word")
    }

    pub fn shape_id(&self, shape: usize) -> usize {
        self.id(SHAPES[shape]).expect("shape word")
    }

    /// One word per line, id = line number.
    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let words: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
        let v = Self { words };
        if v != Self::default() {
            return Err(Error::Format("vocabulary file does not match the generator vocabulary".into()));
        }
        Ok(v)
    }

    /// Inverse of the caption template: the `(color, shape)` pairs in
    /// mention order.
    pub fn parse_caption(&self, ids: &[usize]) -> Result<Vec<(usize, usize)>> {
        let body = match ids {
            [BOS, rest @ .., EOS] => rest,
            _ => return Err(Error::Format("caption must start with <bos> and end with <eos>".into())),
        };
        let words: Vec<&str> = body.iter().map(|&i| self.word(i)).collect::<Result<_>>()?;
        let mut out = Vec::new();
        for (i, chunk) in words.split(|w| *w == "and").enumerate() {
            match chunk {
                ["a", c, s] => {
                    let c = COLORS.iter().position(|x| x == c);
                    let s = SHAPES.iter().position(|x| x == s);
                    match (c, s) {
                        (Some(c), Some(s)) => out.push((c, s)),
                        _ => return Err(Error::Format(format!("bad mention {i}: {chunk:?}"))),
                    }
                }
                _ => return Err(Error::Format(format!("bad mention {i}: {chunk:?}"))),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let v = Vocab::default();
        assert_eq!(v.len(), 17);
        let ids = v.encode("<bos> a red square and a cyan circle <eos>").unwrap();
        assert_eq!(v.parse_caption(&ids).unwrap(), vec![(0, 0), (5, 1)]);
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(matches!(v.encode("a purple square"), Err(Error::Vocabulary(_))));
        assert!(v.parse_caption(&v.encode("<bos> a red <eos>").unwrap()).is_err());
    }
}
