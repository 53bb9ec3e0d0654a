//! Built-in 5x7 pixel font. Shapes are the classic terminal glyphs; visual
//! fidelity is irrelevant, the glyphs only need to be mutually distinct.

use std::collections::BTreeMap;
use std::sync::OnceLock;

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

/// Row-major bitmaps, one `[&str; 7]` of '0'/'1' columns per character.
/// Letters are stored lowercase (text is matched case-sensitively).
const GLYPHS: &[(char, [&str; 7])] = &[
    (' ', ["00000", "00000", "00000", "00000", "00000", "00000", "00000"]),
    ('a', ["01110", "10001", "10001", "11111", "10001", "10001", "10001"]),
    ('b', ["11110", "10001", "10001", "11110", "10001", "10001", "11110"]),
    ('c', ["01110", "10001", "10000", "10000", "10000", "10001", "01110"]),
    ('d', ["11100", "10010", "10001", "10001", "10001", "10010", "11100"]),
    ('e', ["11111", "10000", "10000", "11110", "10000", "10000", "11111"]),
    ('f', ["11111", "10000", "10000", "11110", "10000", "10000", "10000"]),
    ('g', ["01110", "10001", "10000", "10111", "10001", "10001", "01111"]),
    ('h', ["10001", "10001", "10001", "11111", "10001", "10001", "10001"]),
    ('i', ["01110", "00100", "00100", "00100", "00100", "00100", "01110"]),
    ('j', ["00111", "00010", "00010", "00010", "00010", "10010", "01100"]),
    ('k', ["10001", "10010", "10100", "11000", "10100", "10010", "10001"]),
    ('l', ["10000", "10000", "10000", "10000", "10000", "10000", "11111"]),
    ('m', ["10001", "11011", "10101", "10101", "10001", "10001", "10001"]),
    ('n', ["10001", "10001", "11001", "10101", "10011", "10001", "10001"]),
    ('o', ["01110", "10001", "10001", "10001", "10001", "10001", "01110"]),
    ('p', ["11110", "10001", "10001", "11110", "10000", "10000", "10000"]),
    ('q', ["01110", "10001", "10001", "10001", "10101", "10010", "01101"]),
    ('r', ["11110", "10001", "10001", "11110", "10100", "10010", "10001"]),
    ('s', ["01111", "10000", "10000", "01110", "00001", "00001", "11110"]),
    ('t', ["11111", "00100", "00100", "00100", "00100", "00100", "00100"]),
    ('u', ["10001", "10001", "10001", "10001", "10001", "10001", "01110"]),
    ('v', ["10001", "10001", "10001", "10001", "10001", "01010", "00100"]),
    ('w', ["10001", "10001", "10001", "10101", "10101", "10101", "01010"]),
    ('x', ["10001", "10001", "01010", "00100", "01010", "10001", "10001"]),
    ('y', ["10001", "10001", "10001", "01010", "00100", "00100", "00100"]),
    ('z', ["11111", "00001", "00010", "00100", "01000", "10000", "11111"]),
    ('0', ["01110", "10001", "10011", "10101", "11001", "10001", "01110"]),
    ('1', ["00100", "01100", "00100", "00100", "00100", "00100", "01110"]),
    ('2', ["01110", "10001", "00001", "00010", "00100", "01000", "11111"]),
    ('3', ["11111", "00010", "00100", "00010", "00001", "10001", "01110"]),
    ('4', ["00010", "00110", "01010", "10010", "11111", "00010", "00010"]),
    ('5', ["11111", "10000", "11110", "00001", "00001", "10001", "01110"]),
    ('6', ["00110", "01000", "10000", "11110", "10001", "10001", "01110"]),
    ('7', ["11111", "00001", "00010", "00100", "01000", "01000", "01000"]),
    ('8', ["01110", "10001", "10001", "01110", "10001", "10001", "01110"]),
    ('9', ["01110", "10001", "10001", "01111", "00001", "00010", "01100"]),
    ('.', ["00000", "00000", "00000", "00000", "00000", "01100", "01100"]),
    (',', ["00000", "00000", "00000", "00000", "01100", "00100", "01000"]),
    ('-', ["00000", "00000", "00000", "01110", "00000", "00000", "00000"]),
    ('\'', ["01100", "00100", "01000", "00000", "00000", "00000", "00000"]),
    (':', ["00000", "01100", "01100", "00000", "01100", "01100", "00000"]),
    ('!', ["00100", "00100", "00100", "00100", "00100", "00000", "00100"]),
    ('?', ["01110", "10001", "00001", "00010", "00100", "00000", "00100"]),
];

/// A glyph as 7 rows of column bits; bit `x` (LSB first) is the pixel at
/// horizontal offset `x` from the left.
pub type Glyph = [u8; GLYPH_H];

pub struct Font {
    glyphs: BTreeMap<char, Glyph>,
}

impl Font {
    pub fn builtin() -> &'static Font {
        static FONT: OnceLock<Font> = OnceLock::new();
        FONT.get_or_init(|| {
            let mut glyphs = BTreeMap::new();
            for &(c, rows) in GLYPHS {
                let mut g: Glyph = [0; GLYPH_H];
                for (r, row) in rows.iter().enumerate() {
                    assert_eq!(row.len(), GLYPH_W, "glyph {c:?} row {r}");
                    for (x, ch) in row.bytes().enumerate() {
                        if ch == b'1' {
                            g[r] |= 1 << x;
                        }
                    }
                }
                glyphs.insert(c, g);
            }
            Font { glyphs }
        })
    }

    pub fn glyph(&self, c: char) -> Option<&Glyph> {
        self.glyphs.get(&c)
    }

    pub fn has(&self, c: char) -> bool {
        self.glyphs.contains_key(&c)
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.glyphs.keys().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_letters_digits_and_space() {
        let f = Font::builtin();
        for c in 'a'..='z' {
            assert!(f.has(c), "{c}");
        }
        for c in '0'..='9' {
            assert!(f.has(c), "{c}");
        }
        assert!(f.has(' '));
        assert!(!f.has('A'));
        assert!(!f.has('\t'));
    }

    #[test]
    fn glyphs_are_pairwise_distinct_except_space_is_blank() {
        let f = Font::builtin();
        let all: Vec<(char, Glyph)> = f.chars().map(|c| (c, *f.glyph(c).unwrap())).collect();
        for (i, (ci, gi)) in all.iter().enumerate() {
            for (cj, gj) in all.iter().skip(i + 1) {
                assert_ne!(gi, gj, "{ci:?} vs {cj:?}");
            }
        }
        assert_eq!(*f.glyph(' ').unwrap(), [0u8; GLYPH_H]);
    }

    #[test]
    fn sample_glyph_bits() {
        let f = Font::builtin();
        let l = f.glyph('l').unwrap();
        assert_eq!(l[0], 0b00001);
        assert_eq!(l[6], 0b11111);
    }
}
