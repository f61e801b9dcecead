use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::DEFAULT_PACT_ALPHA;

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => {
                        let options: Vec<&str> = vec![$($text),+];
                        Err(format!("expected one of {}, got `{s}`", options.join("|")))
                    }
                }
            }
        }
    };
}

keyword_enum!(Family {
    Mixer => "mixer",
    ResMlp => "resmlp",
    ConvMixer => "convmixer",
});

keyword_enum!(NormKind {
    Affine => "affine",
    LayerNorm => "layernorm",
    BatchNorm => "batchnorm",
});

keyword_enum!(ActKind {
    Gelu => "gelu",
    Relu => "relu",
    Pact => "pact",
});

/// Shape and flavour of one mixing layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub family: Family,
    pub tokens: usize,
    pub channels: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub norm: NormKind,
    pub act: ActKind,
    pub groups: usize,
    pub kernel: usize,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("tokens", self.tokens),
            ("channels", self.channels),
            ("token_hidden", self.token_hidden),
            ("channel_hidden", self.channel_hidden),
            ("groups", self.groups),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.family != Family::ConvMixer && self.channels % self.groups != 0 {
            return Err(Error::config(
                "groups",
                format!("{} does not divide channels = {}", self.groups, self.channels),
            ));
        }
        if self.family == Family::ConvMixer && self.kernel % 2 == 0 {
            return Err(Error::Unsupported(format!(
                "convmixer kernel must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn group_width(&self) -> usize {
        self.channels / self.groups
    }
}

/// Declarative description of a whole classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub patch: usize,
    pub channels: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub norm: NormKind,
    pub act: ActKind,
    pub groups: usize,
    pub kernel: usize,
    pub classes: usize,
    pub eps: f64,
    pub pact_alpha: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: Family::Mixer,
            depth: 4,
            height: 8,
            width: 8,
            in_channels: 1,
            patch: 2,
            channels: 32,
            token_hidden: 32,
            channel_hidden: 64,
            norm: NormKind::LayerNorm,
            act: ActKind::Gelu,
            groups: 4,
            kernel: 3,
            classes: 10,
            eps: 1e-5,
            pact_alpha: DEFAULT_PACT_ALPHA,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch.max(1), self.width / self.patch.max(1))
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch * self.patch
    }

    pub fn layer_spec(&self) -> LayerSpec {
        LayerSpec {
            family: self.family,
            tokens: self.tokens(),
            channels: self.channels,
            token_hidden: self.token_hidden,
            channel_hidden: self.channel_hidden,
            norm: self.norm,
            act: self.act,
            groups: self.groups,
            kernel: self.kernel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("height", self.height),
            ("width", self.width),
            ("in_channels", self.in_channels),
            ("patch", self.patch),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::config(
                "patch",
                format!("{} does not divide the {}x{} image", self.patch, self.height, self.width),
            ));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(self.pact_alpha > 0.0) {
            return Err(Error::config("pact_alpha", "must be positive"));
        }
        if !(self.init_std >= 0.0) || !self.init_std.is_finite() {
            return Err(Error::config("init_std", "must be finite and non-negative"));
        }
        self.layer_spec().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keywords_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.as_str().parse::<Family>().unwrap(), *f);
        }
        assert!("transformer".parse::<Family>().is_err());
        assert_eq!("pact".parse::<ActKind>().unwrap(), ActKind::Pact);
    }

    #[test]
    fn group_count_must_divide_channels() {
        let cfg = ModelConfig {
            channels: 10,
            groups: 4,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "groups"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn patch_must_divide_image() {
        let cfg = ModelConfig {
            patch: 3,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "patch"));
    }

    #[test]
    fn token_count_from_grid() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.tokens(), 16);
        assert_eq!(cfg.patch_dim(), 4);
    }
}
