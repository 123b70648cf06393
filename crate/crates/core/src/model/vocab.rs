// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed token inventory: specials, prompt words, coordinates and classes.

use crate::error::{Error, Result};

const SPECIALS: [&str; 10] = [
    "<bos>", "<system>", "<image>", "<eos>", "ASSISTANT:", "[", "]", ",", "yes", "no",
];

const WORDS: [&str; 20] = [
    "Please", "provide", "the", "bounding", "box", "coordinates", "of", ".", "Is", "there", "a", "in",
    "image", "?", "List", "all", "objects", "Choose", "only", "from",
];

const CLASS_NAMES: [&str; 10] = [
    "person", "bicycle", "car", "dog", "cat", "bird", "horse", "sheep", "cow", "bottle",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    grid_size: usize,
    num_classes: usize,
    coord_base: usize,
    class_base: usize,
}

impl Vocab {
    pub fn new(grid_size: usize, num_classes: usize) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().chain(WORDS.iter()).map(|s| s.to_string()).collect();
        let coord_base = tokens.len();
        tokens.extend((0..grid_size).map(|k| k.to_string()));
        let class_base = tokens.len();
        tokens.extend((0..num_classes).map(Self::class_name));
        Self {
            tokens,
            grid_size,
            num_classes,
            coord_base,
            class_base,
        }
    }

    pub fn class_name(c: usize) -> String {
        CLASS_NAMES
            .get(c)
            .map_or_else(|| format!("class{c}"), |s| s.to_string())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    fn special(&self, s: &str) -> usize {
        self.id(s).expect("special token present")
    }

    pub fn bos(&self) -> usize {
        0
    }
    pub fn system(&self) -> usize {
        1
    }
    pub fn image(&self) -> usize {
        2
    }
    pub fn eos(&self) -> usize {
        3
    }
    pub fn assistant(&self) -> usize {
        4
    }
    pub fn lbracket(&self) -> usize {
        5
    }
    pub fn rbracket(&self) -> usize {
        6
    }
    pub fn comma(&self) -> usize {
        7
    }
    pub fn yes(&self) -> usize {
        8
    }
    pub fn no(&self) -> usize {
        9
    }
    pub fn word(&self, w: &str) -> usize {
        self.special(w)
    }

    pub fn coord(&self, k: usize) -> usize {
        assert!(k < self.grid_size);
        self.coord_base + k
    }

    pub fn coord_value(&self, token: usize) -> Option<usize> {
        (self.coord_base..self.coord_base + self.grid_size)
            .contains(&token)
            .then(|| token - self.coord_base)
    }

    pub fn class(&self, c: usize) -> usize {
        assert!(c < self.num_classes);
        self.class_base + c
    }

    pub fn class_value(&self, token: usize) -> Option<usize> {
        (self.class_base..self.class_base + self.num_classes)
            .contains(&token)
            .then(|| token - self.class_base)
    }

    pub fn is_template(&self, token: usize) -> bool {
        [self.lbracket(), self.rbracket(), self.comma(), self.eos()].contains(&token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Splits on whitespace and maps each piece to its id.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Lookup(format!("unknown token {w:?}"))))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inventory_has_g_coords_and_c_classes() {
        let v = Vocab::new(8, 10);
        assert_eq!((0..v.len()).filter(|&t| v.coord_value(t).is_some()).count(), 8);
        assert_eq!((0..v.len()).filter(|&t| v.class_value(t).is_some()).count(), 10);
        assert_eq!(v.token(v.coord(3)), "3");
        assert_eq!(v.class_value(v.class(7)), Some(7));
        assert_eq!(v.decode(&v.encode("[ 1 , yes ]").unwrap()), "[ 1 , yes ]");
    }
}
