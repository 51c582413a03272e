use std::collections::BTreeMap;
use std::sync::Arc;

use super::{
    ClassifierKind, ClusterModel, DiscriminatorClassifier, KMeansClassifier, StyleClassifier, StyleHead,
    ZeroShotClassifier,
};
use crate::backends::BackendSet;
use crate::{Error, Result};

/// Inputs a classifier factory may draw on.
#[derive(Clone)]
pub struct ClassifierContext {
    pub labels: Option<Vec<String>>,
    pub clusters: Option<ClusterModel>,
    pub style_head: Option<Arc<dyn StyleHead>>,
    pub backends: BackendSet,
    pub temperature: f64,
}

impl ClassifierContext {
    pub fn new(backends: BackendSet) -> Self {
        Self {
            labels: None,
            clusters: None,
            style_head: None,
            backends,
            temperature: 1.0,
        }
    }

    fn labels(&self, who: &str) -> Result<Vec<String>> {
        self.labels
            .clone()
            .ok_or_else(|| Error::Config(format!("{who} classifier needs a label set")))
    }
}

/// `Ok(None)` means "no classifier" (the utility-only and basic methods).
pub type ClassifierFactory =
    Arc<dyn Fn(&ClassifierContext) -> Result<Option<Arc<dyn StyleClassifier>>> + Send + Sync>;

#[derive(Clone)]
pub struct ClassifierRegistry {
    factories: BTreeMap<String, ClassifierFactory>,
}

impl Default for ClassifierRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

impl ClassifierRegistry {
    pub fn with_defaults() -> Self {
        let mut factories: BTreeMap<String, ClassifierFactory> = BTreeMap::new();
        factories.insert(
            ClassifierKind::ZeroShot.name().into(),
            Arc::new(|ctx: &ClassifierContext| {
                let c = ZeroShotClassifier::new(ctx.labels("zero-shot")?, ctx.backends.similarity.clone())?
                    .with_temperature(ctx.temperature);
                Ok(Some(Arc::new(c) as Arc<dyn StyleClassifier>))
            }),
        );
        factories.insert(
            ClassifierKind::Kmeans.name().into(),
            Arc::new(|ctx: &ClassifierContext| {
                let clusters = ctx
                    .clusters
                    .clone()
                    .ok_or_else(|| Error::Config("kmeans classifier needs a cluster model".into()))?;
                let c = KMeansClassifier::new(clusters, ctx.backends.embedder.clone())?.with_temperature(ctx.temperature);
                Ok(Some(Arc::new(c) as Arc<dyn StyleClassifier>))
            }),
        );
        factories.insert(
            ClassifierKind::Discriminator.name().into(),
            Arc::new(|ctx: &ClassifierContext| {
                let head = ctx
                    .style_head
                    .clone()
                    .ok_or_else(|| Error::Config("discriminator classifier needs a style head".into()))?;
                let c = DiscriminatorClassifier::new(head, ctx.labels("discriminator")?)?
                    .with_temperature(ctx.temperature);
                Ok(Some(Arc::new(c) as Arc<dyn StyleClassifier>))
            }),
        );
        factories.insert(ClassifierKind::None.name().into(), Arc::new(|_: &ClassifierContext| Ok(None)));
        Self { factories }
    }

    pub fn register(&mut self, name: impl Into<String>, factory: ClassifierFactory) {
        self.factories.insert(name.into(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, ctx: &ClassifierContext) -> Result<Option<Arc<dyn StyleClassifier>>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown classifier `{name}`")))?;
        factory(ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::LinearStyleHead;
    use crate::Image;

    #[test]
    fn builds_each_strategy_by_name() {
        let set = BackendSet::mock(0, 8).unwrap();
        let mut ctx = ClassifierContext::new(set);
        ctx.labels = Some(vec!["a".into(), "b".into()]);
        ctx.clusters = Some(ClusterModel::new(vec![vec![0.0; 8], vec![1.0; 8]], 0, 0.0).unwrap());
        ctx.style_head = Some(Arc::new(LinearStyleHead::zeros(4, 2)));
        let reg = ClassifierRegistry::with_defaults();
        let img = Image::zeros(4, 4);
        for (name, kind) in [
            ("zero_shot", ClassifierKind::ZeroShot),
            ("kmeans", ClassifierKind::Kmeans),
            ("discriminator", ClassifierKind::Discriminator),
        ] {
            let c = reg.build(name, &ctx).unwrap().unwrap();
            assert_eq!(c.kind(), kind);
            assert_eq!(c.classify(&img).unwrap().n_classes(), 2);
        }
        assert!(reg.build("none", &ctx).unwrap().is_none());
        assert!(matches!(reg.build("svm", &ctx), Err(Error::Config(_))));
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let ctx = ClassifierContext::new(BackendSet::mock(0, 8).unwrap());
        let reg = ClassifierRegistry::with_defaults();
        for name in ["zero_shot", "kmeans", "discriminator"] {
            assert!(matches!(reg.build(name, &ctx), Err(Error::Config(_))), "{name}");
        }
    }
}
