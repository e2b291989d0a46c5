use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 5] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Blue => [0.15, 0.25, 0.95],
            Color::Yellow => [0.95, 0.9, 0.1],
            Color::Purple => [0.6, 0.15, 0.8],
        }
    }
}

impl SizeClass {
    pub fn word(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Top, Side::Bottom];

    pub fn word(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Top => "top",
            Side::Bottom => "bottom",
        }
    }
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    pub fn words(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }
}

/// Background colour of every canvas.
pub const BACKGROUND: [f32; 3] = [0.12, 0.12, 0.12];

/// Closed vocabulary of every word an expression can contain, in a fixed order.
pub const VOCABULARY: [&str; 19] = [
    "the", "circle", "square", "triangle", "red", "green", "blue", "yellow", "purple", "small",
    "large", "on", "left", "right", "top", "bottom", "of", "above", "below",
];

/// Axis-aligned box in pixels, `(x, y)` = top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl PixelBox {
    pub fn center(&self) -> (f32, f32) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn iou(&self, other: &PixelBox) -> f32 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.w * self.h + other.w * other.h - inter)
    }

    /// Both boxes grown by `gap` on every side still overlap.
    pub fn too_close(&self, other: &PixelBox, gap: f32) -> bool {
        self.x - gap < other.x + other.w
            && other.x - gap < self.x + self.w
            && self.y - gap < other.y + other.h
            && other.y - gap < self.y + self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Color,
    pub size: SizeClass,
    /// Tight bounding box; square canvas pixels, integer-aligned.
    pub bbox: PixelBox,
}

/// Expression families, each probing a different kind of evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateClass {
    Category,
    Attribute,
    Location,
    Relational,
}

impl TemplateClass {
    pub const ALL: [TemplateClass; 4] = [
        TemplateClass::Category,
        TemplateClass::Attribute,
        TemplateClass::Location,
        TemplateClass::Relational,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateClass::Category => "category",
            TemplateClass::Attribute => "attribute",
            TemplateClass::Location => "location",
            TemplateClass::Relational => "relational",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        TemplateClass::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attribute {
    Color(Color),
    Size(SizeClass),
}

/// Structured form of a referring expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expression {
    /// "the circle"
    Category { shape: ShapeKind },
    /// "the red circle", "the large circle"
    Attribute {
        shape: ShapeKind,
        attribute: Attribute,
    },
    /// "the circle on the left"
    Location { shape: ShapeKind, side: Side },
    /// "the circle left of the blue square"
    Relational {
        shape: ShapeKind,
        relation: Relation,
        anchor_color: Color,
        anchor_shape: ShapeKind,
    },
}

impl Expression {
    pub fn class(&self) -> TemplateClass {
        match self {
            Expression::Category { .. } => TemplateClass::Category,
            Expression::Attribute { .. } => TemplateClass::Attribute,
            Expression::Location { .. } => TemplateClass::Location,
            Expression::Relational { .. } => TemplateClass::Relational,
        }
    }

    /// Objects of `scene` satisfying every predicate of the expression.
    pub fn matches(&self, objects: &[SceneObject], canvas: u32) -> Vec<usize> {
        let half = canvas as f32 / 2.0;
        let anchor = match *self {
            Expression::Relational {
                anchor_color,
                anchor_shape,
                ..
            } => {
                let found: Vec<&SceneObject> = objects
                    .iter()
                    .filter(|o| o.color == anchor_color && o.shape == anchor_shape)
                    .collect();
                match found.as_slice() {
                    [one] => Some(**one),
                    _ => return Vec::new(),
                }
            }
            _ => None,
        };
        objects
            .iter()
            .enumerate()
            .filter(|(_, o)| match *self {
                Expression::Category { shape } => o.shape == shape,
                Expression::Attribute { shape, attribute } => {
                    o.shape == shape
                        && match attribute {
                            Attribute::Color(c) => o.color == c,
                            Attribute::Size(s) => o.size == s,
                        }
                }
                Expression::Location { shape, side } => {
                    let (cx, cy) = o.bbox.center();
                    o.shape == shape
                        && match side {
                            Side::Left => cx < half,
                            Side::Right => cx > half,
                            Side::Top => cy < half,
                            Side::Bottom => cy > half,
                        }
                }
                Expression::Relational {
                    shape, relation, ..
                } => {
                    let a = anchor.expect("anchor resolved above");
                    let (cx, cy) = o.bbox.center();
                    let (ax, ay) = a.bbox.center();
                    o.shape == shape
                        && **o != a
                        && match relation {
                            Relation::LeftOf => cx < ax,
                            Relation::RightOf => cx > ax,
                            Relation::Above => cy < ay,
                            Relation::Below => cy > ay,
                        }
                }
            })
            .map(|(i, _)| i)
            .collect()
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Expression::Category { shape } => write!(f, "the {}", shape.word()),
            Expression::Attribute { shape, attribute } => {
                let adj = match attribute {
                    Attribute::Color(c) => c.word(),
                    Attribute::Size(s) => s.word(),
                };
                write!(f, "the {adj} {}", shape.word())
            }
            Expression::Location { shape, side } => {
                write!(f, "the {} on the {}", shape.word(), side.word())
            }
            Expression::Relational {
                shape,
                relation,
                anchor_color,
                anchor_shape,
            } => write!(
                f,
                "the {} {} the {} {}",
                shape.word(),
                relation.words(),
                anchor_color.word(),
                anchor_shape.word()
            ),
        }
    }
}

/// One grounding sample: objects on a square canvas and the expression that
/// picks out `referent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub canvas: u32,
    pub objects: Vec<SceneObject>,
    pub referent: usize,
    pub expression: Expression,
}

impl Scene {
    pub fn text(&self) -> String {
        self.expression.to_string()
    }

    pub fn class(&self) -> TemplateClass {
        self.expression.class()
    }

    /// Referent box normalised to `[0, 1]`, `(x, y)` = top-left.
    pub fn gt_box(&self) -> [f32; 4] {
        let b = self.objects[self.referent].bbox;
        let c = self.canvas as f32;
        [b.x / c, b.y / c, b.w / c, b.h / c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(shape: ShapeKind, color: Color, x: f32, y: f32) -> SceneObject {
        SceneObject {
            shape,
            color,
            size: SizeClass::Small,
            bbox: PixelBox {
                x,
                y,
                w: 12.0,
                h: 12.0,
            },
        }
    }

    #[test]
    fn expression_text() {
        let e = Expression::Relational {
            shape: ShapeKind::Circle,
            relation: Relation::LeftOf,
            anchor_color: Color::Blue,
            anchor_shape: ShapeKind::Square,
        };
        assert_eq!(e.to_string(), "the circle left of the blue square");
        let e = Expression::Location {
            shape: ShapeKind::Triangle,
            side: Side::Top,
        };
        assert_eq!(e.to_string(), "the triangle on the top");
        for word in e.to_string().split(' ') {
            assert!(VOCABULARY.contains(&word));
        }
    }

    #[test]
    fn relational_matching() {
        let objects = [
            obj(ShapeKind::Circle, Color::Red, 5.0, 40.0),
            obj(ShapeKind::Square, Color::Blue, 40.0, 40.0),
            obj(ShapeKind::Circle, Color::Green, 70.0, 40.0),
        ];
        let e = Expression::Relational {
            shape: ShapeKind::Circle,
            relation: Relation::LeftOf,
            anchor_color: Color::Blue,
            anchor_shape: ShapeKind::Square,
        };
        assert_eq!(e.matches(&objects, 96), vec![0]);
        let e = Expression::Category {
            shape: ShapeKind::Circle,
        };
        assert_eq!(e.matches(&objects, 96), vec![0, 2]);
    }

    #[test]
    fn box_geometry() {
        let a = PixelBox {
            x: 0.0,
            y: 0.0,
            w: 2.0,
            h: 2.0,
        };
        let b = PixelBox {
            x: 1.0,
            y: 0.0,
            w: 2.0,
            h: 2.0,
        };
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-6);
        assert!(a.too_close(&b, 0.0));
        let c = PixelBox {
            x: 5.0,
            y: 0.0,
            w: 2.0,
            h: 2.0,
        };
        assert!(!a.too_close(&c, 2.0));
        assert!(a.too_close(&c, 3.5));
    }
}
