//! Configurable 3D residual regression network: stride-2 conv stem, stages of
//! residual blocks with stride-2 downsampling, global average pooling, and a
//! scalar linear head.
//!
//! Block layout: conv3x3x3 -> norm -> relu -> conv3x3x3 -> norm -> skip add
//! -> relu. The stem conv downsamples once (there is no pooling layer), and
//! the first block of every stage after the first downsamples with a stride-2
//! conv; skips are identity unless channels or resolution change, in which
//! case a 1x1x1 projection conv plus norm is used. Convolutions carry no bias
//! (the following norm layer absorbs it).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{self, tag};
use crate::tensor::{RunningStats, Tape, Tensor, Var};

const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNet3DConfig {
    pub input_dims: [usize; 3],
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub norm_epsilon: f64,
    pub seed: u64,
}

impl Default for ResNet3DConfig {
    fn default() -> Self {
        ResNet3DConfig {
            input_dims: [32, 32, 32],
            stem_channels: 8,
            stage_channels: vec![8, 16, 32, 64],
            blocks_per_stage: vec![2, 2, 2, 2],
            norm_epsilon: 1e-5,
            seed: 0,
        }
    }
}

impl ResNet3DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != self.blocks_per_stage.len() {
            return Err(Error::config(format!(
                "{} stage widths vs {} block counts",
                self.stage_channels.len(),
                self.blocks_per_stage.len()
            )));
        }
        if self.stage_channels.is_empty() {
            return Err(Error::config("at least one stage is required"));
        }
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(Error::config("norm epsilon must be positive"));
        }
        // Walk the downsampling schedule; the stem and every stage after the
        // first halve the spatial extents, which stops making sense below 2
        // voxels.
        let mut dims = self.input_dims;
        let halve = |dims: &mut [usize; 3], at: &str| -> Result<()> {
            for (a, d) in dims.iter_mut().enumerate() {
                if *d < 2 {
                    return Err(Error::config(format!(
                        "input dims {:?} are too small for the downsampling schedule: \
                         {at} would reduce axis {a} (extent {d}) to nothing",
                        self.input_dims,
                        d = *d,
                    )));
                }
                *d = (*d - 1) / 2 + 1;
            }
            Ok(())
        };
        halve(&mut dims, "the stem conv")?;
        for (s, _) in self.stage_channels.iter().enumerate() {
            if s > 0 {
                halve(&mut dims, &format!("stage {s}"))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
struct BnLayer {
    gamma: Tensor,
    beta: Tensor,
    /// Index into `Model::running`.
    stats: usize,
}

#[derive(Debug)]
struct Block {
    conv1: Tensor,
    bn1: BnLayer,
    conv2: Tensor,
    bn2: BnLayer,
    /// 1x1x1 projection conv + norm when the skip changes shape.
    proj: Option<(Tensor, BnLayer)>,
    stride: usize,
}

#[derive(Debug)]
pub struct Model {
    cfg: ResNet3DConfig,
    stem_conv: Tensor,
    stem_bn: BnLayer,
    stages: Vec<Vec<Block>>,
    head_weight: Tensor,
    head_bias: Tensor,
    running: Vec<RunningStats>,
}

/// Output of one forward wiring: the prediction plus the tape handle of every
/// parameter leaf, for routing gradients back by name.
#[derive(Debug)]
pub struct ForwardPass {
    pub output: Var,
    pub param_vars: Vec<(String, Var)>,
}

fn conv_weight(rng: &mut impl Rng, cout: usize, cin: usize, k: usize) -> Tensor {
    let fan_in = cin * k * k * k;
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..cout * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![cout, cin, k, k, k], data)
        .unwrap()
        .with_requires_grad()
}

impl Model {
    pub fn build(cfg: ResNet3DConfig) -> Result<Model> {
        cfg.validate()?;
        let mut rng = seeds::rng(&[cfg.seed, tag::INIT]);
        let mut running = Vec::new();
        let bn = |channels: usize, running: &mut Vec<RunningStats>| -> BnLayer {
            running.push(RunningStats::new(channels));
            BnLayer {
                gamma: Tensor::full(vec![channels], 1.0).with_requires_grad(),
                beta: Tensor::zeros(vec![channels]).with_requires_grad(),
                stats: running.len() - 1,
            }
        };

        let stem_conv = conv_weight(&mut rng, cfg.stem_channels, 1, 3);
        let stem_bn = bn(cfg.stem_channels, &mut running);

        let mut stages = Vec::new();
        let mut cin = cfg.stem_channels;
        for (s, (&cout, &nblocks)) in cfg
            .stage_channels
            .iter()
            .zip(&cfg.blocks_per_stage)
            .enumerate()
        {
            let mut blocks = Vec::new();
            for b in 0..nblocks {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                let conv1 = conv_weight(&mut rng, cout, cin, 3);
                let bn1 = bn(cout, &mut running);
                let conv2 = conv_weight(&mut rng, cout, cout, 3);
                let bn2 = bn(cout, &mut running);
                let proj = if stride != 1 || cin != cout {
                    let w = conv_weight(&mut rng, cout, cin, 1);
                    Some((w, bn(cout, &mut running)))
                } else {
                    None
                };
                blocks.push(Block {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    proj,
                    stride,
                });
                cin = cout;
            }
            stages.push(blocks);
        }

        let features = *cfg.stage_channels.last().unwrap();
        let bound = 1.0 / (features as f64).sqrt();
        let head_weight = Tensor::new(
            vec![1, features],
            (0..features).map(|_| rng.gen_range(-bound..bound)).collect(),
        )
        .unwrap()
        .with_requires_grad();
        let head_bias = Tensor::new(vec![1], vec![rng.gen_range(-bound..bound)])
            .unwrap()
            .with_requires_grad();

        Ok(Model {
            cfg,
            stem_conv,
            stem_bn,
            stages,
            head_weight,
            head_bias,
            running,
        })
    }

    pub fn config(&self) -> &ResNet3DConfig {
        &self.cfg
    }

    /// Every trainable parameter as `(name, tensor)` in canonical layout
    /// order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("stem.conv.weight".into(), &self.stem_conv),
            ("stem.bn.gamma".into(), &self.stem_bn.gamma),
            ("stem.bn.beta".into(), &self.stem_bn.beta),
        ];
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, blk) in blocks.iter().enumerate() {
                let p = format!("stages.{s}.blocks.{b}");
                out.push((format!("{p}.conv1.weight"), &blk.conv1));
                out.push((format!("{p}.bn1.gamma"), &blk.bn1.gamma));
                out.push((format!("{p}.bn1.beta"), &blk.bn1.beta));
                out.push((format!("{p}.conv2.weight"), &blk.conv2));
                out.push((format!("{p}.bn2.gamma"), &blk.bn2.gamma));
                out.push((format!("{p}.bn2.beta"), &blk.bn2.beta));
                if let Some((w, pbn)) = &blk.proj {
                    out.push((format!("{p}.proj.weight"), w));
                    out.push((format!("{p}.proj_bn.gamma"), &pbn.gamma));
                    out.push((format!("{p}.proj_bn.beta"), &pbn.beta));
                }
            }
        }
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    /// Mutable variant of [`Model::named_params`], same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("stem.conv.weight".into(), &mut self.stem_conv),
            ("stem.bn.gamma".into(), &mut self.stem_bn.gamma),
            ("stem.bn.beta".into(), &mut self.stem_bn.beta),
        ];
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            for (b, blk) in blocks.iter_mut().enumerate() {
                let p = format!("stages.{s}.blocks.{b}");
                out.push((format!("{p}.conv1.weight"), &mut blk.conv1));
                out.push((format!("{p}.bn1.gamma"), &mut blk.bn1.gamma));
                out.push((format!("{p}.bn1.beta"), &mut blk.bn1.beta));
                out.push((format!("{p}.conv2.weight"), &mut blk.conv2));
                out.push((format!("{p}.bn2.gamma"), &mut blk.bn2.gamma));
                out.push((format!("{p}.bn2.beta"), &mut blk.bn2.beta));
                if let Some((w, pbn)) = &mut blk.proj {
                    out.push((format!("{p}.proj.weight"), w));
                    out.push((format!("{p}.proj_bn.gamma"), &mut pbn.gamma));
                    out.push((format!("{p}.proj_bn.beta"), &mut pbn.beta));
                }
            }
        }
        out.push(("head.weight".into(), &mut self.head_weight));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }

    /// Names of the norm-layer running buffers, aligned with layout order.
    /// Buffer name `<layer>.running_mean` / `<layer>.running_var`.
    fn bn_layer_names(&self) -> Vec<String> {
        let mut names = vec!["stem.bn".to_string()];
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, blk) in blocks.iter().enumerate() {
                let p = format!("stages.{s}.blocks.{b}");
                names.push(format!("{p}.bn1"));
                names.push(format!("{p}.bn2"));
                if blk.proj.is_some() {
                    names.push(format!("{p}.proj_bn"));
                }
            }
        }
        names
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// All parameters and running buffers as `(name, shape, data)` in
    /// canonical order, for checkpointing.
    pub fn state_dict(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut entries = Vec::new();
        for (name, t) in self.named_params() {
            entries.push((name, t.shape().to_vec(), t.data().to_vec()));
        }
        for (name, stats) in self.bn_layer_names().iter().zip(&self.running) {
            entries.push((
                format!("{name}.running_mean"),
                vec![stats.mean.len()],
                stats.mean.clone(),
            ));
            entries.push((
                format!("{name}.running_var"),
                vec![stats.var.len()],
                stats.var.clone(),
            ));
        }
        entries
    }

    /// Restores parameters and buffers. Entry names and shapes must match
    /// this model's layout exactly. Loaded running stats are marked warm so
    /// evaluation-mode forward accepts them.
    pub fn load_state_dict(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let expected = self.state_dict();
        if entries.len() != expected.len() {
            return Err(Error::invalid(
                "state dict",
                format!("{} entries, model has {}", entries.len(), expected.len()),
            ));
        }
        for ((name, shape, _), (ename, eshape, _)) in entries.iter().zip(&expected) {
            if name != ename || shape != eshape {
                return Err(Error::invalid(
                    "state dict",
                    format!("expected {ename} {eshape:?}, found {name} {shape:?}"),
                ));
            }
        }
        let mut iter = entries.iter();
        for (_, t) in self.named_params_mut() {
            let (_, _, data) = iter.next().unwrap();
            t.data_mut().copy_from_slice(data);
        }
        for stats in &mut self.running {
            let (_, _, mean) = iter.next().unwrap();
            let (_, _, var) = iter.next().unwrap();
            stats.mean.copy_from_slice(mean);
            stats.var.copy_from_slice(var);
            stats.count = 1;
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        let d = self.cfg.input_dims;
        if s.len() != 5 || s[1] != 1 || [s[2], s[3], s[4]] != d {
            return Err(Error::config(format!(
                "model expects batches of shape [N, 1, {}, {}, {}], got {s:?}",
                d[0], d[1], d[2]
            )));
        }
        Ok(())
    }

    fn wire(
        &self,
        tape: &mut Tape,
        batch: &Tensor,
        training: bool,
        running: &mut [RunningStats],
    ) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        let eps = self.cfg.norm_epsilon;
        let mut param_vars = Vec::new();
        let leaf = |tape: &mut Tape, name: String, t: &Tensor, vars: &mut Vec<(String, Var)>| {
            let v = tape.leaf(t);
            vars.push((name, v));
            v
        };
        let bn_apply = |tape: &mut Tape,
                            x: Var,
                            prefix: &str,
                            layer: &BnLayer,
                            running: &mut [RunningStats],
                            vars: &mut Vec<(String, Var)>|
         -> Result<Var> {
            let g = leaf(tape, format!("{prefix}.gamma"), &layer.gamma, vars);
            let b = leaf(tape, format!("{prefix}.beta"), &layer.beta, vars);
            tape.batch_norm(x, g, b, &mut running[layer.stats], training, eps, BN_MOMENTUM)
        };

        let x = tape.leaf(batch);
        let w = leaf(tape, "stem.conv.weight".into(), &self.stem_conv, &mut param_vars);
        let mut cur = tape.conv3d(x, w, None, 2, 1)?;
        cur = bn_apply(tape, cur, "stem.bn", &self.stem_bn, running, &mut param_vars)?;
        cur = tape.relu_consuming(cur);

        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, blk) in blocks.iter().enumerate() {
                let p = format!("stages.{s}.blocks.{b}");
                let w1 = leaf(tape, format!("{p}.conv1.weight"), &blk.conv1, &mut param_vars);
                let mut main = tape.conv3d(cur, w1, None, blk.stride, 1)?;
                main = bn_apply(tape, main, &format!("{p}.bn1"), &blk.bn1, running, &mut param_vars)?;
                main = tape.relu_consuming(main);
                let w2 = leaf(tape, format!("{p}.conv2.weight"), &blk.conv2, &mut param_vars);
                main = tape.conv3d(main, w2, None, 1, 1)?;
                main = bn_apply(tape, main, &format!("{p}.bn2"), &blk.bn2, running, &mut param_vars)?;
                let skip = match &blk.proj {
                    Some((w, pbn)) => {
                        let wp = leaf(tape, format!("{p}.proj.weight"), w, &mut param_vars);
                        let projected = tape.conv3d(cur, wp, None, blk.stride, 0)?;
                        bn_apply(tape, projected, &format!("{p}.proj_bn"), pbn, running, &mut param_vars)?
                    }
                    None => cur,
                };
                cur = tape.add(main, skip)?;
                cur = tape.relu_consuming(cur);
            }
        }

        let pooled = tape.global_avg_pool(cur)?;
        let hw = leaf(tape, "head.weight".into(), &self.head_weight, &mut param_vars);
        let hb = leaf(tape, "head.bias".into(), &self.head_bias, &mut param_vars);
        let output = tape.linear(pooled, hw, hb)?;
        Ok(ForwardPass { output, param_vars })
    }

    /// Training-mode forward: updates the norm layers' running statistics.
    pub fn forward_train(&mut self, tape: &mut Tape, batch: &Tensor) -> Result<ForwardPass> {
        let mut running = std::mem::take(&mut self.running);
        let result = self.wire(tape, batch, true, &mut running);
        self.running = running;
        result
    }

    /// Evaluation-mode forward: uses frozen running statistics, so the model
    /// can be shared immutably.
    pub fn forward_eval(&self, tape: &mut Tape, batch: &Tensor) -> Result<ForwardPass> {
        let mut scratch = self.running.clone();
        self.wire(tape, batch, false, &mut scratch)
    }

    /// Copies gradients from a backward pass onto the parameter tensors.
    pub fn apply_gradients(
        &mut self,
        pass: &ForwardPass,
        grads: &crate::tensor::Gradients,
    ) -> Result<()> {
        let mut by_name: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
        for (name, var) in &pass.param_vars {
            let g = grads.get(*var).ok_or_else(|| {
                Error::numeric(format!("parameter {name} received no gradient"))
            })?;
            by_name.insert(name, g.to_vec());
        }
        for (name, t) in self.named_params_mut() {
            let g = by_name
                .remove(name.as_str())
                .ok_or_else(|| Error::numeric(format!("no gradient entry for {name}")))?;
            t.set_grad(g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> ResNet3DConfig {
        ResNet3DConfig {
            input_dims: [8, 8, 8],
            stem_channels: 4,
            stage_channels: vec![8],
            blocks_per_stage: vec![1],
            norm_epsilon: 1e-5,
            seed: 11,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dims: [usize; 3]) -> Tensor {
        let numel = n * dims[0] * dims[1] * dims[2];
        Tensor::new(
            vec![n, 1, dims[0], dims[1], dims[2]],
            (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn toy_parameter_count_matches_hand_computation() {
        // stem conv 4*1*27 = 108, stem bn 8,
        // conv1 8*4*27 = 864, bn1 16, conv2 8*8*27 = 1728, bn2 16,
        // proj 8*4*1 = 32, proj bn 16, head 8 + 1 => 2797
        let model = Model::build(toy_config()).unwrap();
        assert_eq!(model.param_count(), 2797);
    }

    #[test]
    fn default_config_forward_outputs_n_by_1() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ResNet3DConfig::default();
        let dims = cfg.input_dims;
        let mut model = Model::build(cfg).unwrap();
        let batch = random_batch(&mut rng, 2, dims);
        let mut tape = Tape::new();
        let pass = model.forward_train(&mut tape, &batch).unwrap();
        assert_eq!(tape.shape(pass.output), &[2, 1]);
        assert!(tape.value(pass.output).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let a = Model::build(toy_config()).unwrap();
        let b = Model::build(toy_config()).unwrap();
        let (sa, sb) = (a.state_dict(), b.state_dict());
        assert_eq!(sa, sb);
        let c = Model::build(ResNet3DConfig {
            seed: 12,
            ..toy_config()
        })
        .unwrap();
        assert_ne!(sa, c.state_dict());
    }

    #[test]
    fn zeroed_head_predicts_its_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = Model::build(toy_config()).unwrap();
        for (name, t) in model.named_params_mut() {
            if name == "head.weight" {
                t.data_mut().fill(0.0);
            }
            if name == "head.bias" {
                t.data_mut()[0] = 58.5;
            }
        }
        let batch = random_batch(&mut rng, 3, [8, 8, 8]);
        let mut tape = Tape::new();
        let pass = model.forward_train(&mut tape, &batch).unwrap();
        for &v in tape.value(pass.output) {
            assert_eq!(v, 58.5);
        }
    }

    #[test]
    fn too_small_input_names_the_failing_stage() {
        let cfg = ResNet3DConfig {
            input_dims: [2, 8, 8],
            stage_channels: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            ..toy_config()
        };
        let err = Model::build(cfg).unwrap_err().to_string();
        assert!(err.contains("stage 1") && err.contains("axis 0"), "got: {err}");

        let cfg = ResNet3DConfig {
            input_dims: [1, 8, 8],
            ..toy_config()
        };
        let err = Model::build(cfg).unwrap_err().to_string();
        assert!(err.contains("stem conv") && err.contains("axis 0"), "got: {err}");
    }

    #[test]
    fn batch_shape_mismatch_is_rejected() {
        let mut model = Model::build(toy_config()).unwrap();
        let batch = Tensor::zeros(vec![1, 1, 8, 8, 7]);
        let mut tape = Tape::new();
        let err = model.forward_train(&mut tape, &batch).unwrap_err();
        assert!(err.to_string().contains("[N, 1, 8, 8, 8]"));
    }

    #[test]
    fn gradient_flow_reaches_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = Model::build(toy_config()).unwrap();
        let batch = random_batch(&mut rng, 4, [8, 8, 8]);
        let target = Tensor::new(vec![4, 1], vec![50.0, 60.0, 55.0, 45.0]).unwrap();
        let mut tape = Tape::new();
        let pass = model.forward_train(&mut tape, &batch).unwrap();
        let t = tape.leaf(&target);
        let loss = tape.mse_loss(pass.output, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        model.apply_gradients(&pass, &grads).unwrap();
        for (name, t) in model.named_params() {
            let g = t.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
            if name.contains("conv") && name.ends_with("weight") {
                let zeros = g.iter().filter(|&&x| x == 0.0).count();
                assert!(
                    (zeros as f64) < 0.5 * g.len() as f64,
                    "{name}: {zeros}/{} zero gradient entries",
                    g.len()
                );
            }
        }
    }

    #[test]
    fn eval_forward_is_batch_size_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = Model::build(toy_config()).unwrap();
        // One training pass warms up the running stats.
        let warm = random_batch(&mut rng, 4, [8, 8, 8]);
        let mut tape = Tape::new();
        model.forward_train(&mut tape, &warm).unwrap();

        let batch = random_batch(&mut rng, 3, [8, 8, 8]);
        let mut tape = Tape::new();
        let all = model.forward_eval(&mut tape, &batch).unwrap();
        let joint = tape.value(all.output).to_vec();
        let dims = [8, 8, 8];
        let per = dims[0] * dims[1] * dims[2];
        for i in 0..3 {
            let single = Tensor::new(
                vec![1, 1, 8, 8, 8],
                batch.data()[i * per..(i + 1) * per].to_vec(),
            )
            .unwrap();
            let mut tape = Tape::new();
            let one = model.forward_eval(&mut tape, &single).unwrap();
            assert!((tape.value(one.output)[0] - joint[i]).abs() < 1e-9);
        }
        // Repeating the same eval forward is bit-identical.
        let mut tape = Tape::new();
        let again = model.forward_eval(&mut tape, &batch).unwrap();
        assert_eq!(tape.value(again.output), joint.as_slice());
    }

    #[test]
    fn eval_before_any_training_batch_is_rejected() {
        let model = Model::build(toy_config()).unwrap();
        let batch = Tensor::zeros(vec![1, 1, 8, 8, 8]);
        let mut tape = Tape::new();
        let err = model.forward_eval(&mut tape, &batch).unwrap_err();
        assert!(err.to_string().contains("running statistics"));
    }

    #[test]
    fn state_dict_round_trips_and_rejects_mismatches() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = Model::build(toy_config()).unwrap();
        let batch = random_batch(&mut rng, 4, [8, 8, 8]);
        let mut tape = Tape::new();
        model.forward_train(&mut tape, &batch).unwrap();

        let state = model.state_dict();
        let mut other = Model::build(ResNet3DConfig {
            seed: 99,
            ..toy_config()
        })
        .unwrap();
        other.load_state_dict(&state).unwrap();
        assert_eq!(other.state_dict(), state);
        // Loaded running stats allow eval mode directly.
        let mut tape = Tape::new();
        other.forward_eval(&mut tape, &batch).unwrap();

        let mut wrong = Model::build(ResNet3DConfig {
            stem_channels: 5,
            ..toy_config()
        })
        .unwrap();
        assert!(wrong.load_state_dict(&state).is_err());
    }
}
