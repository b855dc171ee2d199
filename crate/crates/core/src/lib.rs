//! Multiclass gradient-boosted decision trees with an in-place fine-tuning
//! engine, and the tooling to embed, verify and stress-test watermarks in
//! the resulting ensembles.
//!
//! The crate is organised bottom-up:
//!
//! * [`data`]: datasets, CSV ingestion, seeded splits, z-score standardization.
//! * [`gbdt`]: softmax boosting, second-order split search, leaf-wise growth.
//! * [`inplace`]: fine-tuning that rewrites existing trees instead of adding new ones.
//! * [`clustering`]: k-means, silhouette model selection, nearest neighbours.
//! * [`watermark`]: candidate strategies, subset selection, embedding plans.
//! * [`metrics`]: effectiveness, accuracy, robustness and resilience.
//! * [`model_io`]: lossless JSON model and key files.
//! * [`harness`]: the end-to-end experiment protocol and grid runner.

/// `ALL`, `as_str`, `Display` and `FromStr` for a fieldless enum.
macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = $crate::Error;

            fn from_str(s: &str) -> $crate::Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err($crate::Error::invalid(format!(
                        concat!("unknown ", stringify!($name), " '{}'"), s
                    ))),
                }
            }
        }
    };
}

pub mod clustering;
pub mod data;
pub mod error;
pub mod gbdt;
pub mod harness;
pub mod inplace;
pub mod metrics;
pub mod model_io;
pub mod watermark;

pub use error::{Error, Result};
