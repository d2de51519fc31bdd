//! Volumes, coordinate transforms, interpolation, pooling and the matrix
//! exponential underneath every registration operator.

mod expm;
mod interp;
pub mod io;
mod pool;
mod transform;
mod volume;

pub use expm::{expm, logm, max_abs, one_norm, sqrtm};
pub use interp::{trilinear_sample, warp};
pub use io::{read_volume, write_volume};
pub use pool::{avg_pool, dice, resample_cubic, threshold};
pub use transform::{compose, AffineTransform, DisplacementField, MapTransform};
pub use volume::{Grid, Volume};
