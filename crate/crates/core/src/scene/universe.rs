use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::Slot;

/// Size of the full size x color x material x shape product.
pub const FULL_CLASS_COUNT: usize = 270;

/// Default number of valid object classes.
pub const DEFAULT_CLASS_COUNT: usize = 193;

const SIZES: [&str; 3] = ["small", "medium", "large"];
const COLORS: [&str; 9] = [
    "blue", "brown", "cyan", "gold", "gray", "green", "purple", "red", "yellow",
];
const MATERIALS: [&str; 2] = ["metal", "rubber"];
const SHAPES: [&str; 5] = ["cube", "sphere", "cylinder", "cone", "snitch"];

/// One object class: a (size, color, material, shape) tuple.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub size: String,
    pub color: String,
    pub material: String,
    pub shape: String,
}

impl Attributes {
    pub fn get(&self, slot: Slot) -> &str {
        match slot {
            Slot::Size => &self.size,
            Slot::Color => &self.color,
            Slot::Material => &self.material,
            Slot::Shape => &self.shape,
        }
    }

    pub fn as_tuple(&self) -> [&str; 4] {
        [&self.size, &self.color, &self.material, &self.shape]
    }
}

/// The attribute vocabulary and the ordered list of valid object classes.
///
/// Class `k` is the `k`-th tuple of the full Cartesian product sorted
/// lexicographically by the (size, color, material, shape) strings, so the
/// mapping from class index to attributes is stable for a given class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeUniverse {
    pub sizes: Vec<String>,
    pub colors: Vec<String>,
    pub materials: Vec<String>,
    pub shapes: Vec<String>,
    pub classes: Vec<Attributes>,
}

impl AttributeUniverse {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Values a slot can take.
    pub fn slot_values(&self, slot: Slot) -> &[String] {
        match slot {
            Slot::Size => &self.sizes,
            Slot::Color => &self.colors,
            Slot::Material => &self.materials,
            Slot::Shape => &self.shapes,
        }
    }

    pub fn is_valid_value(&self, slot: Slot, value: &str) -> bool {
        self.slot_values(slot).iter().any(|v| v == value)
    }
}

/// Builds the universe with the first `num_valid_classes` classes.
pub fn build_universe(num_valid_classes: usize) -> Result<AttributeUniverse> {
    if num_valid_classes < 1 || num_valid_classes > FULL_CLASS_COUNT {
        return Err(Error::config(format!(
            "num_valid_classes must be in 1..={FULL_CLASS_COUNT}, got {num_valid_classes}"
        )));
    }

    let mut product: Vec<Attributes> = Vec::with_capacity(FULL_CLASS_COUNT);
    for size in SIZES {
        for color in COLORS {
            for material in MATERIALS {
                for shape in SHAPES {
                    product.push(Attributes {
                        size: size.to_string(),
                        color: color.to_string(),
                        material: material.to_string(),
                        shape: shape.to_string(),
                    });
                }
            }
        }
    }
    product.sort();
    product.truncate(num_valid_classes);

    Ok(AttributeUniverse {
        sizes: SIZES.iter().map(|s| s.to_string()).collect(),
        colors: COLORS.iter().map(|s| s.to_string()).collect(),
        materials: MATERIALS.iter().map(|s| s.to_string()).collect(),
        shapes: SHAPES.iter().map(|s| s.to_string()).collect(),
        classes: product,
    })
}
