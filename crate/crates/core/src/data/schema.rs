use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of landmarks produced by the annotation detector.
pub const DEFAULT_POINTS: usize = 68;

/// Per-dataset constants stored in `<root>/dataset.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub n_points: usize,
    pub height: u32,
    pub width: u32,
    #[serde(default = "default_fps")]
    pub fps: f32,
}

fn default_fps() -> f32 {
    25.0
}

impl DatasetSchema {
    pub fn new(n_points: usize, height: u32, width: u32, fps: f32) -> Result<Self> {
        let s = DatasetSchema {
            n_points,
            height,
            width,
            fps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::Config("n_points must be positive".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: DatasetSchema = toml::from_str(&text).map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line: e
                .span()
                .map(|s| text[..s.start].lines().count().max(1))
                .unwrap_or(0),
            msg: e.message().to_string(),
        })?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_toml(&self) -> String {
        format!(
            "n_points = {}\nheight = {}\nwidth = {}\nfps = {}\n",
            self.n_points, self.height, self.width, self.fps
        )
    }

    pub fn landmarks(&self) -> LandmarkSchema {
        LandmarkSchema::for_points(self.n_points)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LandmarkGroup {
    pub name: &'static str,
    pub indices: Range<usize>,
    pub closed: bool,
}

/// Fixed grouping of landmark indices into facial contours.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LandmarkSchema {
    pub n_points: usize,
    pub groups: Vec<LandmarkGroup>,
    /// Index ranges of the right and left eye contours, when the schema has eyes.
    pub eyes: Option<(Range<usize>, Range<usize>)>,
}

impl LandmarkSchema {
    pub fn for_points(n_points: usize) -> Self {
        if n_points == DEFAULT_POINTS {
            Self::ibug68()
        } else {
            LandmarkSchema {
                n_points,
                groups: vec![LandmarkGroup {
                    name: "contour",
                    indices: 0..n_points,
                    closed: false,
                }],
                eyes: None,
            }
        }
    }

    /// The common 68-point facial layout.
    pub fn ibug68() -> Self {
        let g = |name, indices, closed| LandmarkGroup {
            name,
            indices,
            closed,
        };
        LandmarkSchema {
            n_points: 68,
            groups: vec![
                g("jaw", 0..17, false),
                g("right_brow", 17..22, false),
                g("left_brow", 22..27, false),
                g("nose_bridge", 27..31, false),
                g("nose_base", 31..36, false),
                g("right_eye", 36..42, true),
                g("left_eye", 42..48, true),
                g("outer_lip", 48..60, true),
                g("inner_lip", 60..68, true),
            ],
            eyes: Some((36..42, 42..48)),
        }
    }
}
