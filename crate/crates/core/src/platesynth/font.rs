//! Fixed-width 7x12 bitmap font for digits and uppercase Latin letters.

pub const GLYPH_W: usize = 7;
pub const GLYPH_H: usize = 12;

#[rustfmt::skip]
const GLYPHS: &[(char, [&str; GLYPH_H])] = &[
    ('0', [
        "..###..", ".##.##.", "##...##", "##...##", "##...##", "##...##",
        "##...##", "##...##", "##...##", "##...##", ".##.##.", "..###..",
    ]),
    ('1', [
        "...##..", "..###..", ".####..", "...##..", "...##..", "...##..",
        "...##..", "...##..", "...##..", "...##..", "...##..", ".######",
    ]),
    ('2', [
        ".#####.", "##...##", ".....##", ".....##", "....##.", "...##..",
        "..##...", ".##....", "##.....", "##.....", "##.....", "#######",
    ]),
    ('3', [
        ".#####.", "##...##", ".....##", ".....##", "....##.", "..###..",
        "....##.", ".....##", ".....##", ".....##", "##...##", ".#####.",
    ]),
    ('4', [
        "....##.", "...###.", "..####.", ".##.##.", "##..##.", "##..##.",
        "#######", "#######", "....##.", "....##.", "....##.", "....##.",
    ]),
    ('5', [
        "#######", "##.....", "##.....", "##.....", "######.", ".....##",
        ".....##", ".....##", ".....##", ".....##", "##...##", ".#####.",
    ]),
    ('6', [
        "..####.", ".##....", "##.....", "##.....", "######.", "##...##",
        "##...##", "##...##", "##...##", "##...##", "##...##", ".#####.",
    ]),
    ('7', [
        "#######", ".....##", ".....##", "....##.", "....##.", "...##..",
        "...##..", "..##...", "..##...", "..##...", "..##...", "..##...",
    ]),
    ('8', [
        ".#####.", "##...##", "##...##", "##...##", ".##.##.", "..###..",
        ".##.##.", "##...##", "##...##", "##...##", "##...##", ".#####.",
    ]),
    ('9', [
        ".#####.", "##...##", "##...##", "##...##", "##...##", ".######",
        ".....##", ".....##", ".....##", ".....##", "....##.", ".####..",
    ]),
    ('A', [
        "..###..", ".##.##.", "##...##", "##...##", "##...##", "##...##",
        "#######", "#######", "##...##", "##...##", "##...##", "##...##",
    ]),
    ('B', [
        "######.", "##...##", "##...##", "##...##", "##..##.", "#####..",
        "##..##.", "##...##", "##...##", "##...##", "##...##", "######.",
    ]),
    ('C', [
        ".#####.", "##...##", "##.....", "##.....", "##.....", "##.....",
        "##.....", "##.....", "##.....", "##.....", "##...##", ".#####.",
    ]),
    ('D', [
        "#####..", "##..##.", "##...##", "##...##", "##...##", "##...##",
        "##...##", "##...##", "##...##", "##...##", "##..##.", "#####..",
    ]),
    ('E', [
        "#######", "##.....", "##.....", "##.....", "##.....", "######.",
        "##.....", "##.....", "##.....", "##.....", "##.....", "#######",
    ]),
    ('F', [
        "#######", "##.....", "##.....", "##.....", "##.....", "######.",
        "##.....", "##.....", "##.....", "##.....", "##.....", "##.....",
    ]),
    ('G', [
        ".#####.", "##...##", "##.....", "##.....", "##.....", "##.####",
        "##...##", "##...##", "##...##", "##...##", "##...##", ".#####.",
    ]),
    ('H', [
        "##...##", "##...##", "##...##", "##...##", "##...##", "#######",
        "#######", "##...##", "##...##", "##...##", "##...##", "##...##",
    ]),
    ('I', [
        "#######", "..###..", "..###..", "..###..", "..###..", "..###..",
        "..###..", "..###..", "..###..", "..###..", "..###..", "#######",
    ]),
    ('J', [
        "..#####", "....##.", "....##.", "....##.", "....##.", "....##.",
        "....##.", "....##.", "....##.", "##..##.", "##..##.", ".####..",
    ]),
    ('K', [
        "##...##", "##..##.", "##.##..", "####...", "###....", "###....",
        "####...", "##.##..", "##..##.", "##...##", "##...##", "##...##",
    ]),
    ('L', [
        "##.....", "##.....", "##.....", "##.....", "##.....", "##.....",
        "##.....", "##.....", "##.....", "##.....", "##.....", "#######",
    ]),
    ('M', [
        "##...##", "###.###", "#######", "##.#.##", "##.#.##", "##...##",
        "##...##", "##...##", "##...##", "##...##", "##...##", "##...##",
    ]),
    ('N', [
        "##...##", "###..##", "###..##", "####.##", "##.#.##", "##.####",
        "##..###", "##..###", "##...##", "##...##", "##...##", "##...##",
    ]),
    ('O', [
        ".#####.", "#######", "##...##", "##...##", "##...##", "##...##",
        "##...##", "##...##", "##...##", "##...##", "#######", ".#####.",
    ]),
    ('P', [
        "######.", "##...##", "##...##", "##...##", "##...##", "######.",
        "##.....", "##.....", "##.....", "##.....", "##.....", "##.....",
    ]),
    ('Q', [
        ".#####.", "##...##", "##...##", "##...##", "##...##", "##...##",
        "##...##", "##...##", "##.#.##", "##..###", ".######", ".....##",
    ]),
    ('R', [
        "######.", "##...##", "##...##", "##...##", "##...##", "######.",
        "####...", "##.##..", "##..##.", "##...##", "##...##", "##...##",
    ]),
    ('S', [
        ".#####.", "##...##", "##.....", "##.....", ".##....", "..###..",
        "....##.", ".....##", ".....##", ".....##", "##...##", ".#####.",
    ]),
    ('T', [
        "#######", "#######", "..###..", "..###..", "..###..", "..###..",
        "..###..", "..###..", "..###..", "..###..", "..###..", "..###..",
    ]),
    ('U', [
        "##...##", "##...##", "##...##", "##...##", "##...##", "##...##",
        "##...##", "##...##", "##...##", "##...##", "##...##", ".#####.",
    ]),
    ('V', [
        "##...##", "##...##", "##...##", "##...##", "##...##", "##...##",
        "##...##", ".##.##.", ".##.##.", ".##.##.", "..###..", "...#...",
    ]),
    ('W', [
        "##...##", "##...##", "##...##", "##...##", "##...##", "##...##",
        "##.#.##", "##.#.##", "#######", "###.###", "##...##", "#.....#",
    ]),
    ('X', [
        "##...##", "##...##", ".##.##.", ".##.##.", "..###..", "...#...",
        "..###..", ".##.##.", ".##.##.", "##...##", "##...##", "##...##",
    ]),
    ('Y', [
        "##...##", "##...##", "##...##", ".##.##.", ".##.##.", "..###..",
        "..###..", "..###..", "..###..", "..###..", "..###..", "..###..",
    ]),
    ('Z', [
        "#######", ".....##", ".....##", "....##.", "...##..", "..##...",
        ".##....", "##.....", "##.....", "##.....", "##.....", "#######",
    ]),
];

pub fn glyph(c: char) -> Option<&'static [&'static str; GLYPH_H]> {
    GLYPHS.iter().find(|(g, _)| *g == c).map(|(_, rows)| rows)
}

pub fn covered(c: char) -> bool {
    glyph(c).is_some()
}

/// Whether cell `(row, col)` of the glyph for `c` is ink.
pub fn ink(c: char, row: usize, col: usize) -> bool {
    glyph(c).is_some_and(|rows| rows[row].as_bytes()[col] == b'#')
}
