use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::toy::{
    IdentityEncoder, ToyLatentEncoder, ToyNoisePredictor, ToyPerceptualDistance, ToyPoseConditioner,
    ToyReferenceExtractor, ToySemanticEncoder, TOY_LATENT_CHANNELS, TOY_POSE_CHANNELS,
    TOY_REFERENCE_COUNT, TOY_SEMANTIC_RESOLUTION,
};
use super::{
    ExtractorBundle, LatentEncoder, NoisePredictor, PerceptualDistance, PoseConditioner,
    ReferenceFeatureExtractor, SemanticEncoder,
};
use crate::error::{Error, Result};

/// One role binding: implementation name, free-form parameters, and an
/// optional weight locator owned by the plugin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleSpec {
    pub implementation: String,
    #[serde(default, skip_serializing_if = "toml::Table::is_empty")]
    pub params: toml::Table,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

impl RoleSpec {
    pub fn named(implementation: &str) -> Self {
        Self { implementation: implementation.to_string(), params: toml::Table::new(), weights: None }
    }

    pub fn with_param(mut self, key: &str, value: impl Into<toml::Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn usize_param(&self, key: &str, default: usize) -> Result<usize> {
        match self.params.get(key) {
            None => Ok(default),
            Some(toml::Value::Integer(v)) if *v >= 0 => Ok(*v as usize),
            Some(other) => Err(Error::Configuration(format!(
                "`{}` parameter `{key}` must be a non-negative integer, got {other}",
                self.implementation
            ))),
        }
    }

    pub fn u64_param(&self, key: &str, default: u64) -> Result<u64> {
        self.usize_param(key, default as usize).map(|v| v as u64)
    }
}

/// The `[extractors]` configuration section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorsConfig {
    /// Named starting point whose roles are overridden by any explicit role.
    pub preset: Option<String>,
    pub seed: u64,
    pub encoder: Option<RoleSpec>,
    pub semantic: Option<RoleSpec>,
    pub references: Option<Vec<RoleSpec>>,
    pub noise_predictor: Option<RoleSpec>,
    pub pose: Option<RoleSpec>,
    pub perceptual: Option<RoleSpec>,
}

impl Default for ExtractorsConfig {
    fn default() -> Self {
        Self {
            preset: Some("toy-default".into()),
            seed: 0,
            encoder: None,
            semantic: None,
            references: None,
            noise_predictor: None,
            pose: None,
            perceptual: None,
        }
    }
}

impl ExtractorsConfig {
    pub fn preset(name: &str) -> Self {
        Self { preset: Some(name.to_string()), ..Self::default() }
    }

    /// Expands the preset and overlays explicit roles.
    pub fn materialize(&self) -> Result<ExtractorsConfig> {
        let mut out = match self.preset.as_deref() {
            None => ExtractorsConfig { preset: None, ..ExtractorsConfig::empty(self.seed) },
            Some(name) => preset_roles(name, self.seed)?,
        };
        out.preset = self.preset.clone();
        out.seed = self.seed;
        macro_rules! overlay {
            ($($f:ident),*) => {$( if let Some(v) = &self.$f { out.$f = Some(v.clone()); } )*};
        }
        overlay!(encoder, semantic, references, noise_predictor, pose, perceptual);
        Ok(out)
    }

    fn empty(seed: u64) -> Self {
        Self {
            preset: None,
            seed,
            encoder: None,
            semantic: None,
            references: None,
            noise_predictor: None,
            pose: None,
            perceptual: None,
        }
    }
}

fn preset_roles(name: &str, seed: u64) -> Result<ExtractorsConfig> {
    let refs = |channels: usize| {
        (0..TOY_REFERENCE_COUNT)
            .map(|k| RoleSpec::named("toy").with_param("index", k as i64).with_param("latent_channels", channels as i64))
            .collect::<Vec<_>>()
    };
    match name {
        "toy-default" => Ok(ExtractorsConfig {
            encoder: Some(RoleSpec::named("toy")),
            semantic: Some(RoleSpec::named("toy")),
            references: Some(refs(TOY_LATENT_CHANNELS)),
            noise_predictor: Some(RoleSpec::named("toy")),
            pose: Some(RoleSpec::named("toy")),
            perceptual: Some(RoleSpec::named("toy")),
            ..ExtractorsConfig::empty(seed)
        }),
        "toy-identity" => Ok(ExtractorsConfig {
            encoder: Some(RoleSpec::named("identity")),
            semantic: Some(RoleSpec::named("toy")),
            references: Some(refs(3)),
            noise_predictor: Some(RoleSpec::named("toy").with_param("latent_channels", 3_i64)),
            pose: Some(RoleSpec::named("toy").with_param("factor", 1_i64)),
            perceptual: Some(RoleSpec::named("toy")),
            ..ExtractorsConfig::empty(seed)
        }),
        other => Err(Error::Resolution(format!("unknown extractor preset `{other}`"))),
    }
}

/// What a factory receives.
#[derive(Debug, Clone, Copy)]
pub struct BuildContext<'a> {
    pub spec: &'a RoleSpec,
    pub seed: u64,
}

type Factory<T> = Arc<dyn Fn(BuildContext<'_>) -> Result<Arc<T>> + Send + Sync>;

/// Name -> factory tables for every role.
#[derive(Clone, Default)]
pub struct Registry {
    encoders: BTreeMap<String, Factory<dyn LatentEncoder>>,
    semantics: BTreeMap<String, Factory<dyn SemanticEncoder>>,
    references: BTreeMap<String, Factory<dyn ReferenceFeatureExtractor>>,
    noise_predictors: BTreeMap<String, Factory<dyn NoisePredictor>>,
    poses: BTreeMap<String, Factory<dyn PoseConditioner>>,
    perceptuals: BTreeMap<String, Factory<dyn PerceptualDistance>>,
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry")
            .field("encoders", &self.encoders.keys().collect::<Vec<_>>())
            .field("semantics", &self.semantics.keys().collect::<Vec<_>>())
            .field("references", &self.references.keys().collect::<Vec<_>>())
            .field("noise_predictors", &self.noise_predictors.keys().collect::<Vec<_>>())
            .field("poses", &self.poses.keys().collect::<Vec<_>>())
            .field("perceptuals", &self.perceptuals.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry preloaded with the toy implementations (and `identity` for
    /// the encoder role).
    pub fn with_builtin() -> Self {
        let mut r = Self::empty();
        r.register_encoder("toy", |ctx| {
            let c = ctx.spec.usize_param("latent_channels", TOY_LATENT_CHANNELS)?;
            if c == 0 {
                return Err(Error::Configuration("latent_channels must be at least 1".into()));
            }
            Ok(Arc::new(ToyLatentEncoder::new(ctx.spec.u64_param("seed", ctx.seed)?, c)))
        });
        r.register_encoder("identity", |_| Ok(Arc::new(IdentityEncoder)));
        r.register_semantic("toy", |ctx| {
            let side = ctx.spec.usize_param("resolution", TOY_SEMANTIC_RESOLUTION)?;
            Ok(Arc::new(ToySemanticEncoder::new(ctx.spec.u64_param("seed", ctx.seed)?, side.max(1))))
        });
        r.register_reference("toy", |ctx| {
            Ok(Arc::new(ToyReferenceExtractor::new(
                ctx.spec.u64_param("seed", ctx.seed)?,
                ctx.spec.u64_param("index", 0)?,
                ctx.spec.usize_param("latent_channels", TOY_LATENT_CHANNELS)?,
            )))
        });
        r.register_noise_predictor("toy", |ctx| {
            Ok(Arc::new(ToyNoisePredictor::new(
                ctx.spec.u64_param("seed", ctx.seed)?,
                ctx.spec.usize_param("latent_channels", TOY_LATENT_CHANNELS)?,
                ctx.spec.usize_param("pose_channels", TOY_POSE_CHANNELS)?,
            )))
        });
        r.register_pose("toy", |ctx| {
            let factor = ctx.spec.usize_param("factor", 2)?;
            if factor == 0 {
                return Err(Error::Configuration("pose factor must be at least 1".into()));
            }
            Ok(Arc::new(ToyPoseConditioner::new(ctx.spec.u64_param("seed", ctx.seed)?, factor)))
        });
        r.register_perceptual("toy", |ctx| {
            Ok(Arc::new(ToyPerceptualDistance::new(ctx.spec.u64_param("seed", ctx.seed)?)))
        });
        r
    }

    pub fn register_encoder<F>(&mut self, name: &str, f: F)
    where
        F: Fn(BuildContext<'_>) -> Result<Arc<dyn LatentEncoder>> + Send + Sync + 'static,
    {
        self.encoders.insert(name.to_string(), Arc::new(f));
    }

    pub fn register_semantic<F>(&mut self, name: &str, f: F)
    where
        F: Fn(BuildContext<'_>) -> Result<Arc<dyn SemanticEncoder>> + Send + Sync + 'static,
    {
        self.semantics.insert(name.to_string(), Arc::new(f));
    }

    pub fn register_reference<F>(&mut self, name: &str, f: F)
    where
        F: Fn(BuildContext<'_>) -> Result<Arc<dyn ReferenceFeatureExtractor>> + Send + Sync + 'static,
    {
        self.references.insert(name.to_string(), Arc::new(f));
    }

    pub fn register_noise_predictor<F>(&mut self, name: &str, f: F)
    where
        F: Fn(BuildContext<'_>) -> Result<Arc<dyn NoisePredictor>> + Send + Sync + 'static,
    {
        self.noise_predictors.insert(name.to_string(), Arc::new(f));
    }

    pub fn register_pose<F>(&mut self, name: &str, f: F)
    where
        F: Fn(BuildContext<'_>) -> Result<Arc<dyn PoseConditioner>> + Send + Sync + 'static,
    {
        self.poses.insert(name.to_string(), Arc::new(f));
    }

    pub fn register_perceptual<F>(&mut self, name: &str, f: F)
    where
        F: Fn(BuildContext<'_>) -> Result<Arc<dyn PerceptualDistance>> + Send + Sync + 'static,
    {
        self.perceptuals.insert(name.to_string(), Arc::new(f));
    }

    /// Builds every role or nothing.
    pub fn resolve(&self, config: &ExtractorsConfig) -> Result<ExtractorBundle> {
        let cfg = config.materialize()?;
        let seed = cfg.seed;
        let encoder = build(&self.encoders, "encoder", cfg.encoder.as_ref(), seed)?;
        let semantic = build(&self.semantics, "semantic", cfg.semantic.as_ref(), seed)?;
        let ref_specs = cfg
            .references
            .as_ref()
            .ok_or_else(|| Error::Resolution("no reference extractors configured".into()))?;
        if ref_specs.is_empty() {
            return Err(Error::Resolution("at least one reference extractor is required".into()));
        }
        let references = ref_specs
            .iter()
            .map(|s| build(&self.references, "reference", Some(s), seed))
            .collect::<Result<Vec<_>>>()?;
        let noise = build(&self.noise_predictors, "noise_predictor", cfg.noise_predictor.as_ref(), seed)?;
        let pose = build(&self.poses, "pose", cfg.pose.as_ref(), seed)?;
        let perceptual = build(&self.perceptuals, "perceptual", cfg.perceptual.as_ref(), seed)?;
        ExtractorBundle::new(encoder, semantic, references, noise, pose, perceptual)
    }
}

fn build<T: ?Sized>(
    table: &BTreeMap<String, Factory<T>>,
    role: &str,
    spec: Option<&RoleSpec>,
    seed: u64,
) -> Result<Arc<T>> {
    let spec = spec.ok_or_else(|| Error::Resolution(format!("no implementation configured for role `{role}`")))?;
    let factory = table.get(&spec.implementation).ok_or_else(|| {
        Error::Resolution(format!(
            "unknown {role} implementation `{}` (known: {})",
            spec.implementation,
            table.keys().cloned().collect::<Vec<_>>().join(", ")
        ))
    })?;
    factory(BuildContext { spec, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_default_preset_resolves_three_references() {
        let bundle = Registry::with_builtin().resolve(&ExtractorsConfig::default()).unwrap();
        assert_eq!(bundle.reference_count(), 3);
        let rec = bundle.record();
        assert_eq!(rec.encoder, "toy");
        assert_eq!(rec.references, vec!["toy#0", "toy#1", "toy#2"]);
    }

    #[test]
    fn identity_preset_is_consistent() {
        let bundle = Registry::with_builtin().resolve(&ExtractorsConfig::preset("toy-identity")).unwrap();
        assert_eq!(bundle.encoder.name(), "identity");
    }

    #[test]
    fn unknown_names_fail() {
        let reg = Registry::with_builtin();
        let mut cfg = ExtractorsConfig::default();
        cfg.semantic = Some(RoleSpec::named("clip-vit-l14"));
        let err = reg.resolve(&cfg).unwrap_err();
        assert!(matches!(err, Error::Resolution(_)), "{err}");
        assert!(reg.resolve(&ExtractorsConfig::preset("nope")).is_err());
    }

    #[test]
    fn mismatched_channels_is_configuration_error() {
        let mut cfg = ExtractorsConfig::default();
        cfg.encoder = Some(RoleSpec::named("identity"));
        let err = Registry::with_builtin().resolve(&cfg).unwrap_err();
        assert!(matches!(err, Error::Configuration(_)), "{err}");
    }

    #[test]
    fn empty_reference_list_rejected() {
        let mut cfg = ExtractorsConfig::default();
        cfg.references = Some(vec![]);
        assert!(Registry::with_builtin().resolve(&cfg).is_err());
    }

    #[test]
    fn no_preset_needs_every_role() {
        let cfg = ExtractorsConfig { preset: None, ..ExtractorsConfig::default() };
        assert!(matches!(Registry::with_builtin().resolve(&cfg), Err(Error::Resolution(_))));
    }
}
