//! Generator and discriminator topologies.

use polypforge_nn::im2col::ConvGeom;
use polypforge_nn::layers::{BatchNorm2d, Conv2d, ConvTranspose2d, InstanceNorm2d};
use polypforge_nn::{Graph, Init, ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{invalid, Result};

const WEIGHT_INIT: Init = Init::Normal { mean: 0.0, std: 0.02 };

/// Residual encoder-decoder generator: edge convolution, strided
/// downsampling, residual blocks at the bottleneck, transposed-convolution
/// upsampling, edge convolution to RGB with tanh.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub ngf: usize,
    pub n_downsampling: usize,
    pub n_residual_blocks: usize,
    pub edge_kernel: usize,
}

impl GeneratorArch {
    pub fn validate(&self, image_size: u32) -> Result<()> {
        if self.ngf == 0 {
            return Err(invalid("ngf", "must be positive"));
        }
        if self.edge_kernel.is_multiple_of(2) {
            return Err(invalid("edge_kernel", "must be odd"));
        }
        let factor = 1u32 << self.n_downsampling;
        if !image_size.is_multiple_of(factor) {
            return Err(invalid(
                "image_size",
                format!("{image_size} is not divisible by the downsampling factor {factor}"),
            ));
        }
        if image_size / factor < 2 || (self.edge_kernel / 2) as u32 >= image_size {
            return Err(invalid("image_size", format!("{image_size} is too small for this generator")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ResnetGenerator {
    edge_pad: usize,
    stem: Conv2d,
    down: Vec<Conv2d>,
    blocks: Vec<(Conv2d, Conv2d)>,
    up: Vec<ConvTranspose2d>,
    head: Conv2d,
}

impl ResnetGenerator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        arch: &GeneratorArch,
        rng: &mut R,
    ) -> Result<Self> {
        let k = arch.edge_kernel;
        let stem = Conv2d::new(store, &format!("{prefix}.stem"), 3, arch.ngf, k, 1, 0, false, WEIGHT_INIT, rng)?;
        let mut ch = arch.ngf;
        let mut down = Vec::new();
        for i in 0..arch.n_downsampling {
            down.push(Conv2d::new(store, &format!("{prefix}.down{i}"), ch, ch * 2, 3, 2, 1, false, WEIGHT_INIT, rng)?);
            ch *= 2;
        }
        let mut blocks = Vec::new();
        for i in 0..arch.n_residual_blocks {
            let a = Conv2d::new(store, &format!("{prefix}.res{i}.a"), ch, ch, 3, 1, 0, false, WEIGHT_INIT, rng)?;
            let b = Conv2d::new(store, &format!("{prefix}.res{i}.b"), ch, ch, 3, 1, 0, false, WEIGHT_INIT, rng)?;
            blocks.push((a, b));
        }
        let mut up = Vec::new();
        for i in 0..arch.n_downsampling {
            up.push(ConvTranspose2d::new(
                store,
                &format!("{prefix}.up{i}"),
                ch,
                ch / 2,
                3,
                2,
                1,
                1,
                false,
                WEIGHT_INIT,
                rng,
            )?);
            ch /= 2;
        }
        let head = Conv2d::new(store, &format!("{prefix}.head"), ch, 3, k, 1, 0, true, WEIGHT_INIT, rng)?;
        Ok(ResnetGenerator { edge_pad: k / 2, stem, down, blocks, up, head })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let norm = InstanceNorm2d::default();
        let mut h = g.reflect_pad(x, self.edge_pad)?;
        h = self.stem.forward(g, h)?;
        h = norm.forward(g, h)?;
        h = g.relu(h);
        for conv in &self.down {
            h = conv.forward(g, h)?;
            h = norm.forward(g, h)?;
            h = g.relu(h);
        }
        for (a, b) in &self.blocks {
            let mut r = g.reflect_pad(h, 1)?;
            r = a.forward(g, r)?;
            r = norm.forward(g, r)?;
            r = g.relu(r);
            r = g.reflect_pad(r, 1)?;
            r = b.forward(g, r)?;
            r = norm.forward(g, r)?;
            h = g.add(h, r)?;
        }
        for conv in &self.up {
            h = conv.forward(g, h)?;
            h = norm.forward(g, h)?;
            h = g.relu(h);
        }
        h = g.reflect_pad(h, self.edge_pad)?;
        h = self.head.forward(g, h)?;
        Ok(g.tanh(h))
    }
}

/// Fully convolutional patch discriminator: one logit per receptive-field
/// patch (70×70 with three strided layers).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub ndf: usize,
    pub layers: usize,
}

impl DiscriminatorArch {
    fn widths(&self) -> Vec<usize> {
        (0..=self.layers).map(|i| self.ndf * (1usize << i.min(3))).collect()
    }

    /// Side length of the patch-logit map.
    pub fn output_size(&self, image_size: u32) -> Option<usize> {
        let mut s = image_size as usize;
        for _ in 0..self.layers {
            s = ConvGeom::square(4, 2, 1).out_dim(s, 4)?;
        }
        s = ConvGeom::square(4, 1, 1).out_dim(s, 4)?;
        ConvGeom::square(4, 1, 1).out_dim(s, 4)
    }

    pub fn validate(&self, image_size: u32) -> Result<()> {
        if self.ndf == 0 || self.layers == 0 {
            return Err(invalid("disc_layers", "discriminator needs positive width and depth"));
        }
        match self.output_size(image_size) {
            Some(s) if s >= 1 => Ok(()),
            _ => Err(invalid(
                "image_size",
                format!("{image_size} is too small for {} discriminator layers", self.layers),
            )),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    convs: Vec<(Conv2d, bool)>,
}

impl PatchDiscriminator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        arch: &DiscriminatorArch,
        rng: &mut R,
    ) -> Result<Self> {
        let w = arch.widths();
        let mut convs = Vec::new();
        convs.push((Conv2d::new(store, &format!("{prefix}.c0"), 3, w[0], 4, 2, 1, true, WEIGHT_INIT, rng)?, false));
        for i in 1..arch.layers {
            convs.push((
                Conv2d::new(store, &format!("{prefix}.c{i}"), w[i - 1], w[i], 4, 2, 1, false, WEIGHT_INIT, rng)?,
                true,
            ));
        }
        let l = arch.layers;
        convs.push((
            Conv2d::new(store, &format!("{prefix}.c{l}"), w[l - 1], w[l], 4, 1, 1, false, WEIGHT_INIT, rng)?,
            true,
        ));
        convs.push((Conv2d::new(store, &format!("{prefix}.out"), w[l], 1, 4, 1, 1, true, WEIGHT_INIT, rng)?, false));
        Ok(PatchDiscriminator { convs })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let norm = InstanceNorm2d::default();
        let last = self.convs.len() - 1;
        let mut h = x;
        for (i, (conv, normed)) in self.convs.iter().enumerate() {
            h = conv.forward(g, h)?;
            if *normed {
                h = norm.forward(g, h)?;
            }
            if i < last {
                h = g.leaky_relu(h, 0.2);
            }
        }
        Ok(h)
    }
}

/// The four networks of a cycle-consistent translator. `g` maps source to
/// target, `f` target to source; `dx` judges the source domain, `dy` the
/// target domain.
#[derive(Clone, Debug)]
pub struct CycleNets {
    pub g: ResnetGenerator,
    pub f: ResnetGenerator,
    pub dx: PatchDiscriminator,
    pub dy: PatchDiscriminator,
}

impl CycleNets {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        gen: &GeneratorArch,
        disc: &DiscriminatorArch,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(CycleNets {
            g: ResnetGenerator::new(store, "G", gen, rng)?,
            f: ResnetGenerator::new(store, "F", gen, rng)?,
            dx: PatchDiscriminator::new(store, "DX", disc, rng)?,
            dy: PatchDiscriminator::new(store, "DY", disc, rng)?,
        })
    }
}

/// Layout shared by the DCGAN generator and discriminator: `n_up` stride-2
/// stages between a `base`×`base` map and the full image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DcganLayout {
    pub base: usize,
    pub n_up: usize,
}

impl DcganLayout {
    pub fn for_size(image_size: u32) -> Result<Self> {
        let s = image_size as usize;
        let mut n_up = 0;
        while s.is_multiple_of(1 << (n_up + 1)) && s >> (n_up + 1) >= 4 {
            n_up += 1;
        }
        if n_up == 0 {
            return Err(invalid("image_size", format!("{image_size} cannot be reached by doubling from 4 or more")));
        }
        Ok(DcganLayout { base: s >> n_up, n_up })
    }
}

#[derive(Clone, Debug)]
pub struct DcganGenerator {
    latent_dim: usize,
    stages: Vec<(ConvTranspose2d, Option<BatchNorm2d>)>,
}

impl DcganGenerator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        latent_dim: usize,
        ngf: usize,
        layout: DcganLayout,
        rng: &mut R,
    ) -> Result<Self> {
        let width = |i: usize| ngf * (1usize << (layout.n_up - 1 - i).min(3));
        let mut stages = Vec::new();
        let first =
            ConvTranspose2d::new(store, "G.up0", latent_dim, width(0), layout.base, 1, 0, 0, false, WEIGHT_INIT, rng)?;
        stages.push((first, Some(bn(store, "G.bn0", width(0), rng)?)));
        for i in 1..layout.n_up {
            let c = ConvTranspose2d::new(
                store,
                &format!("G.up{i}"),
                width(i - 1),
                width(i),
                4,
                2,
                1,
                0,
                false,
                WEIGHT_INIT,
                rng,
            )?;
            stages.push((c, Some(bn(store, &format!("G.bn{i}"), width(i), rng)?)));
        }
        let n = layout.n_up;
        let out =
            ConvTranspose2d::new(store, &format!("G.up{n}"), width(n - 1), 3, 4, 2, 1, 0, true, WEIGHT_INIT, rng)?;
        stages.push((out, None));
        Ok(DcganGenerator { latent_dim, stages })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// `z` has shape `[N, latent_dim, 1, 1]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        let mut h = z;
        for (conv, norm) in &self.stages {
            h = conv.forward(g, h)?;
            if let Some(bn) = norm {
                h = bn.forward(g, h)?;
                h = g.relu(h);
            }
        }
        Ok(g.tanh(h))
    }
}

#[derive(Clone, Debug)]
pub struct DcganDiscriminator {
    stages: Vec<(Conv2d, Option<BatchNorm2d>)>,
    head: Conv2d,
}

impl DcganDiscriminator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        ndf: usize,
        layout: DcganLayout,
        rng: &mut R,
    ) -> Result<Self> {
        let width = |i: usize| ndf * (1usize << i.min(3));
        let mut stages = Vec::new();
        for i in 0..layout.n_up {
            let cin = if i == 0 { 3 } else { width(i - 1) };
            let c = Conv2d::new(store, &format!("D.c{i}"), cin, width(i), 4, 2, 1, false, WEIGHT_INIT, rng)?;
            let norm = if i == 0 { None } else { Some(bn(store, &format!("D.bn{i}"), width(i), rng)?) };
            stages.push((c, norm));
        }
        let head = Conv2d::new(store, "D.out", width(layout.n_up - 1), 1, layout.base, 1, 0, true, WEIGHT_INIT, rng)?;
        Ok(DcganDiscriminator { stages, head })
    }

    /// One logit per image, shape `[N, 1, 1, 1]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, norm) in &self.stages {
            h = conv.forward(g, h)?;
            if let Some(bn) = norm {
                h = bn.forward(g, h)?;
            }
            h = g.leaky_relu(h, 0.2);
        }
        Ok(self.head.forward(g, h)?)
    }
}

fn bn<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    ch: usize,
    rng: &mut R,
) -> Result<BatchNorm2d> {
    let gamma = Init::Normal { mean: 1.0, std: 0.02 }.sample(&[ch], rng);
    Ok(BatchNorm2d::with_gamma(store, name, ch, gamma)?)
}
