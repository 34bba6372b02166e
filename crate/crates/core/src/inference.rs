//! Image-to-landmark inference with a trained model.

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::InputFrame;
use crate::error::{invalid, Result};
use crate::geometry::{map_to_image, normalize_depth, BBox, CubeMapping, LandmarkSet};
use crate::imaging::ImageTensor;
use crate::network::{Mode, ModelState, Network};
use crate::training::volume_mapping;
use crate::volumetric::VoxelGrid;

#[derive(Clone, Debug)]
pub struct Prediction {
    /// Original image pixels, zero-mean depth.
    pub landmarks: LandmarkSet,
    /// Raw coordinate output in volume units.
    pub volume_landmarks: LandmarkSet,
    /// Finest estimated volume.
    pub volume: VoxelGrid,
    /// The network input crop.
    pub input: ImageTensor,
}

pub struct Predictor {
    net: Network,
    config: RunConfig,
    state: ModelState,
    mapping: CubeMapping,
}

impl Predictor {
    pub fn new(ck: Checkpoint) -> Result<Self> {
        let net = ck.network()?;
        let mapping = volume_mapping(&net, &ck.config.train)?;
        Ok(Self {
            net,
            config: ck.config,
            state: ck.state,
            mapping,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn scheme(&self) -> &str {
        &self.config.model.scheme
    }

    pub fn n_landmarks(&self) -> usize {
        self.config.model.coordnet.n_landmarks
    }

    fn frame(&self, image: &ImageTensor, bbox: Option<BBox>) -> Result<InputFrame> {
        let bbox = match bbox {
            Some(b) => b,
            None => BBox::new(0.0, 0.0, image.width() as f64, image.height() as f64)?,
        };
        Ok(InputFrame {
            bbox,
            input_size: self.config.model.hourglass.input_size,
        })
    }

    /// `bbox` defaults to the whole image.
    pub fn predict(&self, image: &ImageTensor, bbox: Option<BBox>) -> Result<Prediction> {
        Ok(self.predict_batch(&[(image, bbox)])?.remove(0))
    }

    pub fn predict_batch(&self, items: &[(&ImageTensor, Option<BBox>)]) -> Result<Vec<Prediction>> {
        if items.is_empty() {
            return Err(invalid("nothing to predict"));
        }
        let mut out = Vec::with_capacity(items.len());
        let bs = self.config.train.batch_size.max(1);
        for chunk in items.chunks(bs) {
            let frames = chunk.iter().map(|(img, b)| self.frame(img, *b)).collect::<Result<Vec<_>>>()?;
            let crops: Vec<ImageTensor> = chunk.iter().zip(&frames).map(|((img, _), f)| f.crop(img)).collect();
            let refs: Vec<&ImageTensor> = crops.iter().collect();
            let (volumes, coords) = self.net.model_forward(&self.state, &refs, Mode::Eval)?;
            let finest = volumes.last().expect("at least one stack");
            let dims = self.config.model.volume_dims();
            let per_vol = dims.iter().product::<usize>();
            let dim = self.config.model.coordnet.output_dim();
            for (n, (crop, frame)) in crops.into_iter().zip(&frames).enumerate() {
                let row = &coords.data()[n * dim..(n + 1) * dim];
                let vol_lm = LandmarkSet::from_flat(row, self.scheme().to_string())?;
                let input_lm = map_to_image(&vol_lm, &self.mapping);
                let landmarks = normalize_depth(&frame.from_input(&input_lm)?)?;
                let volume = VoxelGrid::from_values(
                    dims,
                    self.config.train.sigma,
                    finest.data()[n * per_vol..(n + 1) * per_vol].to_vec(),
                )?;
                out.push(Prediction {
                    landmarks,
                    volume_landmarks: vol_lm,
                    volume,
                    input: crop,
                });
            }
        }
        Ok(out)
    }
}
