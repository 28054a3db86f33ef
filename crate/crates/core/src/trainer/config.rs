use std::fmt;
use std::str::FromStr;

use super::TrainError;
use crate::wl::DEFAULT_WL_DEPTH;

/// Model variant, including the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    /// GIN branch with δ, kernel branch with ζ.
    #[default]
    Full,
    /// No perturbation on the GIN branch.
    P1,
    /// No perturbation on the kernel branch.
    P2,
    /// Two independently initialised GIN branches, no kernel branch.
    GinOnlyDual,
    /// Two independently initialised kernel heads, no GIN branch.
    GknOnlyDual,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Self::Full, Self::P1, Self::P2, Self::GinOnlyDual, Self::GknOnlyDual];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::P1 => "p1",
            Self::P2 => "p2",
            Self::GinOnlyDual => "gin-only",
            Self::GknOnlyDual => "gkn-only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "full" => Ok(Self::Full),
            "p1" => Ok(Self::P1),
            "p2" => Ok(Self::P2),
            "gin-only" | "gin-only-dual" => Ok(Self::GinOnlyDual),
            "gkn-only" | "gkn-only-dual" => Ok(Self::GknOnlyDual),
            _ => Err(TrainError::Config(format!(
                "unknown variant {s:?}; valid variants: full, p1, p2, gin-only, gkn-only"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Frobenius radius of every perturbation.
    pub epsilon: f64,
    pub wl_depth: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Master switch for both perturbations; the variant can only disable more.
    pub perturb: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            hidden_dim: 64,
            batch_size: 64,
            epochs: 50,
            lambda1: 0.1,
            lambda2: 0.1,
            epsilon: 1.0,
            wl_depth: DEFAULT_WL_DEPTH,
            seed: 0,
            variant: Variant::Full,
            perturb: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad(format!(
                "lambda1 and lambda2 must be non-negative, got {} and {}",
                self.lambda1, self.lambda2
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be at least 1".into());
        }
        Ok(())
    }

    /// Whether the first (δ) and second (ζ) branch perturbations are active.
    pub fn perturbations_enabled(&self) -> (bool, bool) {
        (
            self.perturb && self.variant != Variant::P1,
            self.perturb && self.variant != Variant::P2,
        )
    }

    /// Sets one `key = value` entry; keys mirror the field names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError>
        where
            T::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e| TrainError::Config(format!("invalid value {value:?} for {key}: {e}")))
        }
        match key {
            "lr" => self.lr = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "wl_depth" => self.wl_depth = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            "perturb" => self.perturb = parse(key, value)?,
            _ => return Err(TrainError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(TrainError::Config(format!("line {}: expected key = value, found {line:?}", i + 1)));
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "lr = {}\nhidden_dim = {}\nbatch_size = {}\nepochs = {}\nlambda1 = {}\nlambda2 = {}\n\
             epsilon = {}\nwl_depth = {}\nseed = {}\nvariant = {}\nperturb = {}\n",
            self.lr,
            self.hidden_dim,
            self.batch_size,
            self.epochs,
            self.lambda1,
            self.lambda2,
            self.epsilon,
            self.wl_depth,
            self.seed,
            self.variant,
            self.perturb
        )
    }
}
