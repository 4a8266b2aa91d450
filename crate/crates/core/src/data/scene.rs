use serde::{Deserialize, Serialize};

use crate::numerics::Stream;

use super::vocab::{TokenId, Vocabulary, COLORS, OBJECTS};
use super::DatasetStyle;

pub const GRID: usize = 4;
pub const CELLS: usize = GRID * GRID;
pub const N_OBJECTS: usize = OBJECTS.len();
pub const N_COLORS: usize = COLORS.len();
pub const N_TINTS: usize = 4;
/// Per-cell feature width: object one-hot, color one-hot, tint one-hot.
pub const PATCH_DIM: usize = N_OBJECTS + N_COLORS + N_TINTS;
pub const MIN_OBJECTS: usize = 2;
pub const MAX_OBJECTS: usize = 5;
/// Objects named by one scripted caption.
pub const SCRIPTED_MENTIONS: usize = 3;

pub const FILLER_PROB: f64 = 0.15;
pub const REPEAT_PROB: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mood {
    Neutral,
    Happy,
    Sad,
    Angry,
}

impl Mood {
    pub const ALL: [Mood; 4] = [Mood::Neutral, Mood::Happy, Mood::Sad, Mood::Angry];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub object: usize,
    pub color: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub cells: Vec<Option<Cell>>,
    /// Background tint; only mood-aware scenes carry one.
    pub tint: Option<usize>,
}

/// Quadrant index of a raster cell.
pub fn quadrant(cell: usize) -> usize {
    let (row, col) = (cell / GRID, cell % GRID);
    (row / 2) * 2 + col / 2
}

impl Scene {
    pub fn random(rng: &mut Stream) -> Self {
        let k = MIN_OBJECTS + rng.below(MAX_OBJECTS - MIN_OBJECTS + 1);
        let mut order: Vec<usize> = (0..CELLS).collect();
        rng.shuffle(&mut order);
        let mut cells = vec![None; CELLS];
        for &c in &order[..k] {
            cells[c] = Some(Cell {
                object: rng.below(N_OBJECTS),
                color: rng.below(N_COLORS),
            });
        }
        Self { cells, tint: None }
    }

    pub fn occupied(&self) -> Vec<(usize, Cell)> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|c| (i, c)))
            .collect()
    }

    /// Patch features, one row per cell in raster order.
    pub fn image(&self) -> Vec<Vec<f64>> {
        self.cells
            .iter()
            .map(|cell| {
                let mut f = vec![0.0; PATCH_DIM];
                if let Some(c) = cell {
                    f[c.object] = 1.0;
                    f[N_OBJECTS + c.color] = 1.0;
                }
                if let Some(t) = self.tint {
                    f[N_OBJECTS + N_COLORS + t] = 1.0;
                }
                f
            })
            .collect()
    }
}

fn object_phrase(vocab: &Vocabulary, cell: usize, c: Cell) -> [TokenId; 3] {
    [vocab.color(c.color), vocab.object(c.object), vocab.position(quadrant(cell))]
}

/// Builds one caption for `scene`. Scripted captions follow
/// `a picture (color object position)+` over up to three objects in raster
/// order; unscripted captions narrate every object in shuffled clauses with
/// fillers and an occasional repeated clause. The tint is never mentioned.
pub fn compose_caption(
    scene: &Scene,
    style: DatasetStyle,
    vocab: &Vocabulary,
    rng: &mut Stream,
) -> Vec<TokenId> {
    let objects = scene.occupied();
    let w = |s: &str| vocab.known(s);
    match style {
        DatasetStyle::Scripted | DatasetStyle::MoodAware => {
            let mut chosen: Vec<usize> = (0..objects.len()).collect();
            if chosen.len() > SCRIPTED_MENTIONS {
                rng.shuffle(&mut chosen);
                chosen.truncate(SCRIPTED_MENTIONS);
                chosen.sort_unstable();
            }
            let mut out = vec![w("a"), w("picture")];
            for i in chosen {
                let (cell, c) = objects[i];
                out.extend(object_phrase(vocab, cell, c));
            }
            out
        }
        DatasetStyle::Unscripted => {
            let mut clauses: Vec<Vec<TokenId>> = objects
                .iter()
                .map(|&(cell, c)| {
                    let [color, object, pos] = object_phrase(vocab, cell, c);
                    vec![w("a"), color, object, w("at"), pos]
                })
                .collect();
            rng.shuffle(&mut clauses);
            if rng.bernoulli(REPEAT_PROB) {
                let i = rng.below(clauses.len());
                let again = clauses[i].clone();
                clauses.insert(i + 1, again);
            }
            let mut words = vec![w("so"), w("in"), w("this"), w("picture"), w("i"), w("see")];
            words.extend(clauses.into_iter().flatten());
            words.extend([w("and"), w("that"), w("is"), w("it")]);

            let fillers = vocab.filler_ids();
            let mut out = Vec::with_capacity(words.len() + 8);
            // one filler slot before every word and one at the end
            for word in words.iter().map(Some).chain([None]) {
                if rng.bernoulli(FILLER_PROB) {
                    out.push(fillers[rng.below(fillers.len())]);
                }
                if let Some(&t) = word {
                    out.push(t);
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrants() {
        assert_eq!(quadrant(0), 0);
        assert_eq!(quadrant(3), 1);
        assert_eq!(quadrant(12), 2);
        assert_eq!(quadrant(15), 3);
        assert_eq!(quadrant(5), 0);
    }

    #[test]
    fn scene_occupancy_in_range() {
        let root = Stream::new(1);
        for i in 0..200 {
            let s = Scene::random(&mut root.fork(i));
            let k = s.occupied().len();
            assert!((MIN_OBJECTS..=MAX_OBJECTS).contains(&k));
        }
    }

    #[test]
    fn scripted_caption_length_window() {
        let vocab = Vocabulary::standard();
        let root = Stream::new(2);
        for i in 0..500 {
            let mut rng = root.fork(i);
            let scene = Scene::random(&mut rng);
            let cap = compose_caption(&scene, DatasetStyle::Scripted, &vocab, &mut rng);
            let k = scene.occupied().len().min(SCRIPTED_MENTIONS);
            assert_eq!(cap.len(), 2 + 3 * k);
            assert!((8..=12).contains(&cap.len()));
        }
    }

    #[test]
    fn unscripted_captions_usually_contain_fillers() {
        let vocab = Vocabulary::standard();
        let root = Stream::new(3);
        let n = 1000;
        let with_filler = (0..n)
            .filter(|&i| {
                let mut rng = root.fork(i);
                let scene = Scene::random(&mut rng);
                let cap = compose_caption(&scene, DatasetStyle::Unscripted, &vocab, &mut rng);
                cap.iter().any(|&t| vocab.is_filler(t))
            })
            .count();
        assert!(with_filler as f64 / n as f64 >= 0.95, "{with_filler}");
    }

    #[test]
    fn tint_words_never_spoken() {
        let vocab = Vocabulary::standard();
        let tints = vocab.tint_ids();
        let root = Stream::new(4);
        for i in 0..300 {
            let mut rng = root.fork(i);
            let mut scene = Scene::random(&mut rng);
            scene.tint = Some(rng.below(N_TINTS));
            for style in [DatasetStyle::Scripted, DatasetStyle::Unscripted, DatasetStyle::MoodAware] {
                let cap = compose_caption(&scene, style, &vocab, &mut rng);
                assert!(cap.iter().all(|t| !tints.contains(t)));
            }
        }
    }

    #[test]
    fn image_features_are_one_hot() {
        let mut rng = Stream::new(5);
        let mut scene = Scene::random(&mut rng);
        scene.tint = Some(2);
        let img = scene.image();
        assert_eq!(img.len(), CELLS);
        for (row, cell) in img.iter().zip(&scene.cells) {
            assert_eq!(row.len(), PATCH_DIM);
            let expected = if cell.is_some() { 3.0 } else { 1.0 };
            assert_eq!(row.iter().sum::<f64>(), expected);
            assert_eq!(row[N_OBJECTS + N_COLORS + 2], 1.0);
        }
    }
}
