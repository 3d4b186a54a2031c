//! Procedural shape scenes with captions that enumerate entity, interaction and
//! scene facts. The caption is a pure function of the rendered scene.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::encode_ppm;
use crate::store::{Corpus, Record};

pub const SYNTH_IMAGE_SIZE: u32 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
}

pub const SHAPES: [Shape; 4] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Diamond,
];

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
        }
    }

    /// Whether the pixel offset `(dx, dy)` from the center lies inside a shape of half-size `r`.
    fn covers(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Triangle => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Color {
    pub name: &'static str,
    pub rgb: [u8; 3],
}

pub const COLORS: [Color; 4] = [
    Color {
        name: "red",
        rgb: [220, 30, 30],
    },
    Color {
        name: "green",
        rgb: [30, 190, 60],
    },
    Color {
        name: "blue",
        rgb: [40, 70, 230],
    },
    Color {
        name: "yellow",
        rgb: [235, 215, 40],
    },
];

pub const BACKGROUNDS: [Color; 3] = [
    Color {
        name: "black",
        rgb: [15, 15, 15],
    },
    Color {
        name: "gray",
        rgb: [128, 128, 128],
    },
    Color {
        name: "white",
        rgb: [245, 245, 245],
    },
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Size {
    Small,
    Large,
}

impl Size {
    fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    fn radius(self) -> f32 {
        match self {
            Size::Small => 9.0,
            Size::Large => 14.0,
        }
    }
}

/// Quadrant of the canvas. Centers fall on patch-grid corners, so a shape covers
/// the same pixels relative to its patches wherever it is placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    fn center(self) -> (f32, f32) {
        let half = SYNTH_IMAGE_SIZE as f32 / 2.0;
        (
            (self.col as f32 + 0.5) * half,
            (self.row as f32 + 0.5) * half,
        )
    }

    fn name(self) -> &'static str {
        const NAMES: [[&str; 2]; 2] = [["top left", "top right"], ["bottom left", "bottom right"]];
        NAMES[self.row as usize][self.col as usize]
    }

    fn detail(self) -> String {
        let row = ["up high", "down low"][self.row as usize];
        let col = ["on the left", "on the right"][self.col as usize];
        format!("{row} {col}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub cell: Cell,
}

impl Object {
    fn phrase(&self) -> String {
        format!(
            "{} {} {}",
            self.size.name(),
            self.color.name,
            self.shape.name()
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Scene {
    pub background: Color,
    pub objects: Vec<Object>,
}

fn relation(a: Cell, b: Cell) -> &'static str {
    use std::cmp::Ordering::*;
    match (a.row.cmp(&b.row), a.col.cmp(&b.col)) {
        (Less, Less) => "above and to the left of",
        (Less, Greater) => "above and to the right of",
        (Less, Equal) => "above",
        (Greater, Less) => "below and to the left of",
        (Greater, Greater) => "below and to the right of",
        (Greater, Equal) => "below",
        (Equal, Less) => "to the left of",
        (Equal, Greater) => "to the right of",
        (Equal, Equal) => "on top of",
    }
}

impl Scene {
    pub fn render(&self) -> RgbImage {
        let mut img =
            RgbImage::from_pixel(SYNTH_IMAGE_SIZE, SYNTH_IMAGE_SIZE, Rgb(self.background.rgb));
        for obj in &self.objects {
            let (cx, cy) = obj.cell.center();
            let r = obj.size.radius();
            for (x, y, px) in img.enumerate_pixels_mut() {
                if obj
                    .shape
                    .covers(x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r)
                {
                    *px = Rgb(obj.color.rgb);
                }
            }
        }
        img
    }

    /// Entity facts, then the interaction between objects, then scene facts.
    /// Each attribute is stated twice so that one-word differences carry weight.
    pub fn caption(&self) -> String {
        let main = &self.objects[0];
        let mut s = format!(
            "A {} at {}. The {} is {} and {}, {}.",
            main.phrase(),
            main.cell.name(),
            main.shape.name(),
            main.size.name(),
            main.color.name,
            main.cell.detail()
        );
        if let Some(other) = self.objects.get(1) {
            s.push_str(&format!(
                " A {} at {}. The {} is {} the {}.",
                other.phrase(),
                other.cell.name(),
                other.phrase(),
                relation(other.cell, main.cell),
                main.phrase()
            ));
        }
        let shapes = match &self.objects[..] {
            [a] => format!("one {}", a.shape.name()),
            [a, b, ..] => format!("two shapes, a {} and a {}", a.shape.name(), b.shape.name()),
            [] => String::new(),
        };
        s.push_str(&format!(
            " Plain {} background, {shapes} on {}.",
            self.background.name, self.background.name
        ));
        s
    }

    pub fn labels(&self) -> BTreeMap<String, String> {
        let main = &self.objects[0];
        BTreeMap::from([
            ("shape".to_string(), main.shape.name().to_string()),
            ("color".to_string(), main.color.name.to_string()),
            ("background".to_string(), self.background.name.to_string()),
        ])
    }
}

fn random_object(rng: &mut ChaCha8Rng, avoid: Option<Cell>) -> Object {
    let cell = loop {
        let c = Cell {
            row: rng.random_range(0..2),
            col: rng.random_range(0..2),
        };
        if Some(c) != avoid {
            break c;
        }
    };
    Object {
        shape: *SHAPES.choose(rng).unwrap(),
        color: *COLORS.choose(rng).unwrap(),
        size: if rng.random_bool(0.5) {
            Size::Large
        } else {
            Size::Small
        },
        cell,
    }
}

/// `n` scenes with pairwise distinct captions. `max_objects` is 1 or 2.
pub fn generate_scenes(n: usize, seed: u64, max_objects: usize) -> Result<Vec<Scene>> {
    if !(1..=2).contains(&max_objects) {
        return Err(Error::Config(format!(
            "max_objects must be 1 or 2, got {max_objects}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut scenes = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while scenes.len() < n {
        attempts += 1;
        if attempts > 100 * n + 1000 {
            return Err(Error::Config(format!("cannot draw {n} distinct scenes")));
        }
        let main = random_object(&mut rng, None);
        let mut objects = vec![main];
        if max_objects == 2 && rng.random_bool(0.5) {
            objects.push(random_object(&mut rng, Some(main.cell)));
        }
        let scene = Scene {
            background: *BACKGROUNDS.choose(&mut rng).unwrap(),
            objects,
        };
        if seen.insert(scene.caption()) {
            scenes.push(scene);
        }
    }
    Ok(scenes)
}

/// Writes PPM images under `dir/images` and returns the corpus (ids from `first_id`).
pub fn write_corpus(scenes: &[Scene], first_id: u64, dir: &Path) -> Result<Corpus> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let id = first_id + i as u64;
        let rel = format!("images/{id:06}.ppm");
        let path = dir.join(&rel);
        std::fs::write(&path, encode_ppm(&scene.render())?).map_err(|e| Error::io(&path, e))?;
        records.push(Record {
            id,
            caption: scene.caption(),
            image: rel,
            labels: scene.labels(),
        });
    }
    Corpus::new(records, dir)
}

/// Class names of a labelled attribute.
pub fn label_values(task: &str) -> Option<Vec<&'static str>> {
    match task {
        "shape" => Some(SHAPES.iter().map(|s| s.name()).collect()),
        "color" => Some(COLORS.iter().map(|c| c.name).collect()),
        "background" => Some(BACKGROUNDS.iter().map(|c| c.name).collect()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_unique() {
        let a = generate_scenes(300, 7, 2).unwrap();
        let b = generate_scenes(300, 7, 2).unwrap();
        assert_eq!(a, b);
        let captions: HashSet<String> = a.iter().map(Scene::caption).collect();
        assert_eq!(captions.len(), 300);
        assert_ne!(a, generate_scenes(300, 8, 2).unwrap());
    }

    #[test]
    fn captions_name_the_rendered_content() {
        for scene in generate_scenes(100, 1, 2).unwrap() {
            let cap = scene.caption();
            let img = scene.render();
            for obj in &scene.objects {
                assert!(cap.contains(obj.shape.name()) && cap.contains(obj.color.name));
                assert!(img.pixels().any(|p| p.0 == obj.color.rgb), "{cap}");
            }
            assert!(cap.contains(scene.background.name));
            assert!(cap.is_ascii());
        }
    }

    #[test]
    fn single_object_mode() {
        let scenes = generate_scenes(64, 3, 1).unwrap();
        assert!(scenes.iter().all(|s| s.objects.len() == 1));
        assert!(generate_scenes(1, 0, 3).is_err());
    }

    #[test]
    fn shapes_are_distinguishable() {
        let masks: Vec<Vec<bool>> = SHAPES
            .iter()
            .map(|s| {
                (0..400)
                    .map(|i| s.covers((i % 20) as f32 - 9.5, (i / 20) as f32 - 9.5, 10.0))
                    .collect()
            })
            .collect();
        for i in 0..4 {
            for j in i + 1..4 {
                let diff = masks[i]
                    .iter()
                    .zip(&masks[j])
                    .filter(|(a, b)| a != b)
                    .count();
                assert!(diff > 30, "{i} vs {j}: {diff}");
            }
        }
    }
}
