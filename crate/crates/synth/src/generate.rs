use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SynthError};
use crate::scene::{
    Attribute, Color, Expression, PixelBox, Relation, Scene, SceneObject, ShapeKind, Side,
    SizeClass, TemplateClass,
};

/// Fractions of each template class; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateMix {
    pub category: f64,
    pub attribute: f64,
    pub location: f64,
    pub relational: f64,
}

impl Default for TemplateMix {
    fn default() -> Self {
        TemplateMix {
            category: 0.25,
            attribute: 0.25,
            location: 0.25,
            relational: 0.25,
        }
    }
}

impl TemplateMix {
    pub fn only(class: TemplateClass) -> Self {
        let mut mix = TemplateMix {
            category: 0.0,
            attribute: 0.0,
            location: 0.0,
            relational: 0.0,
        };
        *mix.weight_mut(class) = 1.0;
        mix
    }

    pub fn weight(&self, class: TemplateClass) -> f64 {
        match class {
            TemplateClass::Category => self.category,
            TemplateClass::Attribute => self.attribute,
            TemplateClass::Location => self.location,
            TemplateClass::Relational => self.relational,
        }
    }

    fn weight_mut(&mut self, class: TemplateClass) -> &mut f64 {
        match class {
            TemplateClass::Category => &mut self.category,
            TemplateClass::Attribute => &mut self.attribute,
            TemplateClass::Location => &mut self.location,
            TemplateClass::Relational => &mut self.relational,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = TemplateClass::ALL.map(|c| self.weight(c));
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SynthError::InvalidMix(format!(
                "negative or non-finite weight in {self:?}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(SynthError::InvalidMix(format!(
                "fractions sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    /// Parses `category=0.25,attribute=0.25,location=0.25,relational=0.25`;
    /// omitted classes get weight 0.
    pub fn parse(s: &str) -> Result<Self> {
        let mut mix = TemplateMix {
            category: 0.0,
            attribute: 0.0,
            location: 0.0,
            relational: 0.0,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part.split_once('=').ok_or_else(|| {
                SynthError::InvalidMix(format!("expected name=value, got {part:?}"))
            })?;
            let class = TemplateClass::parse(name.trim()).ok_or_else(|| {
                SynthError::InvalidMix(format!("unknown template class {name:?}"))
            })?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| SynthError::InvalidMix(format!("bad fraction {value:?}")))?;
            *mix.weight_mut(class) = value;
        }
        mix.validate()?;
        Ok(mix)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TemplateClass {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for class in TemplateClass::ALL {
            acc += self.weight(class);
            if u < acc {
                return class;
            }
        }
        // rounding leftovers go to the last class with weight
        *TemplateClass::ALL
            .iter()
            .rev()
            .find(|c| self.weight(**c) > 0.0)
            .expect("validated mix has a positive weight")
    }
}

impl std::fmt::Display for TemplateMix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "category={},attribute={},location={},relational={}",
            self.category, self.attribute, self.location, self.relational
        )
    }
}

/// Scene-layout parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub canvas: u32,
    pub max_objects: usize,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            canvas: 96,
            max_objects: 6,
            max_attempts: 1000,
        }
    }
}

impl SceneConfig {
    fn side_range(&self, size: SizeClass) -> (u32, u32) {
        let c = self.canvas as f32;
        let (lo, hi) = match size {
            SizeClass::Small => (c / 8.0, c / 6.0),
            SizeClass::Large => (c * 0.23, c * 0.31),
        };
        (lo.round().max(3.0) as u32, hi.round().max(4.0) as u32)
    }

    /// Minimum separation for location and relational predicates.
    fn margin(&self) -> f32 {
        self.canvas as f32 * 0.08
    }
}

const PLACEMENT_GAP: f32 = 2.0;

fn place(
    rng: &mut impl Rng,
    cfg: &SceneConfig,
    size: SizeClass,
    placed: &[PixelBox],
) -> Option<PixelBox> {
    let (lo, hi) = cfg.side_range(size);
    let side = rng.gen_range(lo..=hi);
    if side + 2 > cfg.canvas {
        return None;
    }
    for _ in 0..50 {
        let x = rng.gen_range(1..=cfg.canvas - side - 1) as f32;
        let y = rng.gen_range(1..=cfg.canvas - side - 1) as f32;
        let b = PixelBox {
            x,
            y,
            w: side as f32,
            h: side as f32,
        };
        if placed.iter().all(|p| !b.too_close(p, PLACEMENT_GAP)) {
            return Some(b);
        }
    }
    None
}

fn random_object(rng: &mut impl Rng) -> (ShapeKind, Color, SizeClass) {
    let shape = *ShapeKind::ALL.choose(rng).unwrap();
    let color = *Color::ALL.choose(rng).unwrap();
    let size = if rng.gen_bool(0.5) {
        SizeClass::Small
    } else {
        SizeClass::Large
    };
    (shape, color, size)
}

/// Signed separation along the axis a side or relation talks about; positive
/// means the predicate holds.
fn side_score(side: Side, o: &SceneObject, canvas: u32) -> f32 {
    let half = canvas as f32 / 2.0;
    let (cx, cy) = o.bbox.center();
    match side {
        Side::Left => half - cx,
        Side::Right => cx - half,
        Side::Top => half - cy,
        Side::Bottom => cy - half,
    }
}

fn relation_score(relation: Relation, o: &SceneObject, anchor: &SceneObject) -> f32 {
    let (cx, cy) = o.bbox.center();
    let (ax, ay) = anchor.bbox.center();
    match relation {
        Relation::LeftOf => ax - cx,
        Relation::RightOf => cx - ax,
        Relation::Above => ay - cy,
        Relation::Below => cy - ay,
    }
}

/// Draws one scene of the requested class by rejection sampling. The referent
/// is the only object satisfying the expression, and location / relational
/// predicates hold (or fail) by at least a fixed margin.
pub fn generate_scene(seed: u64, class: TemplateClass, cfg: &SceneConfig) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_objects = match class {
        TemplateClass::Relational => 3,
        _ => 2,
    };
    if cfg.canvas < 16 {
        return Err(SynthError::InvalidArgument(format!(
            "canvas {} is below 16 pixels",
            cfg.canvas
        )));
    }
    if cfg.max_objects < min_objects {
        return Err(SynthError::InvalidArgument(format!(
            "{} scenes need at least {min_objects} objects",
            class.name()
        )));
    }
    for _ in 0..cfg.max_attempts {
        if let Some(scene) = try_scene(&mut rng, seed, class, cfg, min_objects) {
            return Ok(scene);
        }
    }
    Err(SynthError::RejectionExhausted {
        scene: seed,
        attempts: cfg.max_attempts,
    })
}

fn try_scene(
    rng: &mut ChaCha8Rng,
    seed: u64,
    class: TemplateClass,
    cfg: &SceneConfig,
    min_objects: usize,
) -> Option<Scene> {
    let n = rng.gen_range(min_objects..=cfg.max_objects);
    let mut kinds: Vec<(ShapeKind, Color, SizeClass)> =
        (0..n).map(|_| random_object(rng)).collect();
    // object 0 is the referent until the final shuffle
    if class != TemplateClass::Category {
        kinds[1].0 = kinds[0].0;
    }
    if class == TemplateClass::Relational && kinds[2].0 == kinds[0].0 {
        let others: Vec<ShapeKind> = ShapeKind::ALL
            .into_iter()
            .filter(|s| *s != kinds[0].0)
            .collect();
        kinds[2].0 = *others.choose(rng).unwrap();
    }

    let mut objects = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n);
    for &(shape, color, size) in &kinds {
        let bbox = place(rng, cfg, size, &boxes)?;
        boxes.push(bbox);
        objects.push(SceneObject {
            shape,
            color,
            size,
            bbox,
        });
    }

    let referent = objects[0];
    let margin = cfg.margin();
    let same_shape = |i: usize| i != 0 && objects[i].shape == referent.shape;
    let expression = match class {
        TemplateClass::Category => Expression::Category {
            shape: referent.shape,
        },
        TemplateClass::Attribute => {
            let attribute = if rng.gen_bool(0.5) {
                Attribute::Color(referent.color)
            } else {
                Attribute::Size(referent.size)
            };
            Expression::Attribute {
                shape: referent.shape,
                attribute,
            }
        }
        TemplateClass::Location => {
            let side = *Side::ALL.choose(rng).unwrap();
            let clear = side_score(side, &referent, cfg.canvas) >= margin
                && (0..n)
                    .filter(|&i| same_shape(i))
                    .all(|i| side_score(side, &objects[i], cfg.canvas) <= -margin);
            if !clear {
                return None;
            }
            Expression::Location {
                shape: referent.shape,
                side,
            }
        }
        TemplateClass::Relational => {
            let relation = *Relation::ALL.choose(rng).unwrap();
            let anchor = objects[2];
            let clear = relation_score(relation, &referent, &anchor) >= margin
                && (0..n)
                    .filter(|&i| same_shape(i))
                    .all(|i| relation_score(relation, &objects[i], &anchor) <= -margin);
            if !clear {
                return None;
            }
            Expression::Relational {
                shape: referent.shape,
                relation,
                anchor_color: anchor.color,
                anchor_shape: anchor.shape,
            }
        }
    };
    if expression.matches(&objects, cfg.canvas) != [0] {
        return None;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let shuffled: Vec<SceneObject> = order.iter().map(|&i| objects[i]).collect();
    let referent = order.iter().position(|&i| i == 0).unwrap();
    Some(Scene {
        seed,
        canvas: cfg.canvas,
        objects: shuffled,
        referent,
        expression,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }
}

/// 80/10/10 partition of `count` scenes as (train, val, test).
pub fn split_counts(count: usize) -> (usize, usize, usize) {
    let train = count * 8 / 10;
    let val = count / 10;
    (train, val, count - train - val)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of scene `index`. Distinct indices give distinct seeds because the
/// mixer is a bijection on its (distinct) inputs.
pub fn scene_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master).wrapping_add(index))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub id: u64,
    pub split: Split,
    pub scene: Scene,
}

/// `count` scenes from `master_seed`, classes drawn from `mix`, split 80/10/10
/// in index order.
pub fn generate(
    master_seed: u64,
    count: usize,
    mix: &TemplateMix,
    cfg: &SceneConfig,
) -> Result<Vec<GeneratedScene>> {
    if count == 0 {
        return Err(SynthError::InvalidArgument(
            "scene count must be positive".into(),
        ));
    }
    mix.validate()?;
    let (train, val, _) = split_counts(count);
    (0..count)
        .map(|i| {
            let seed = scene_seed(master_seed, i as u64);
            let mut class_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5_5E5);
            let class = mix.sample(&mut class_rng);
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            Ok(GeneratedScene {
                id: i as u64,
                split,
                scene: generate_scene(seed, class, cfg)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_parsing_and_validation() {
        let m = TemplateMix::parse("relational=1.0").unwrap();
        assert_eq!(m, TemplateMix::only(TemplateClass::Relational));
        assert!(TemplateMix::parse("category=0.5").is_err());
        assert!(TemplateMix::parse("colour=1.0").is_err());
        assert!(TemplateMix::parse("category=1.5,attribute=-0.5").is_err());
        assert_eq!(
            TemplateMix::parse(&TemplateMix::default().to_string()).unwrap(),
            TemplateMix::default()
        );
    }

    #[test]
    fn split_sizes() {
        assert_eq!(split_counts(25_000), (20_000, 2_500, 2_500));
        assert_eq!(split_counts(10), (8, 1, 1));
    }

    #[test]
    fn every_class_generates() {
        let cfg = SceneConfig::default();
        for class in TemplateClass::ALL {
            for s in 0..20 {
                let scene = generate_scene(s, class, &cfg).unwrap();
                assert_eq!(scene.class(), class);
                assert_eq!(
                    scene.expression.matches(&scene.objects, cfg.canvas),
                    vec![scene.referent]
                );
            }
        }
    }

    #[test]
    fn too_constrained_config_fails_cleanly() {
        let cfg = SceneConfig {
            canvas: 96,
            max_objects: 2,
            max_attempts: 1000,
        };
        assert!(matches!(
            generate_scene(1, TemplateClass::Relational, &cfg),
            Err(SynthError::InvalidArgument(_))
        ));
        let cramped = SceneConfig {
            canvas: 16,
            max_objects: 6,
            max_attempts: 0,
        };
        assert!(matches!(
            generate_scene(1, TemplateClass::Location, &cramped),
            Err(SynthError::RejectionExhausted { .. })
        ));
    }
}
