//! Backbone and head assembled into one classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Scalar, Var};
use crate::backbone::{backbone_forward, BackboneConfig, BackboneParams, Grid};
use crate::error::Result;
use crate::head::{head_forward, joint_loss, HeadConfig, HeadOutputs, HeadParams};
use crate::nn::{join, mix_seed, Parameterized};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: BackboneParams,
    pub head: HeadParams,
}

/// Everything one forward pass leaves on the tape.
#[derive(Debug)]
pub struct Forward {
    pub features: Grid,
    pub outputs: HeadOutputs,
}

impl Model {
    pub fn init(backbone: BackboneConfig, head: HeadConfig, seed: u64) -> Result<Self> {
        backbone.validate()?;
        head.validate(backbone.out_side(), backbone.out_side())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_dim = backbone.out_channels();
        let backbone = BackboneParams::init(backbone, &mut rng)?;
        let head = HeadParams::init(head, in_dim, &mut rng);
        Ok(Model { backbone, head })
    }

    pub fn classes(&self) -> usize {
        self.head.config.classes
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, image: &Tensor, training: bool, seed: u64) -> Result<Forward> {
        let features = backbone_forward(g, image, &self.backbone)?;
        let outputs = head_forward(
            g,
            features.var,
            features.h,
            features.w,
            &self.head,
            training,
            mix_seed(seed, 1),
        )?;
        Ok(Forward { features, outputs })
    }

    /// Joint loss of one labelled image.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<T>, image: &Tensor, label: usize, training: bool, seed: u64) -> Result<(Var, Forward)> {
        let fwd = self.forward(g, image, training, seed)?;
        let loss = joint_loss(g, label, &fwd.outputs.logits())?;
        Ok((loss, fwd))
    }
}

impl Parameterized for Model {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.backbone.collect(&join(prefix, "backbone"), out);
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.backbone.collect_mut(out);
        self.head.collect_mut(out);
    }
}
