//! Zero-shot sketch-based image retrieval with residual adapters and a frozen
//! text-embedding classifier.
//!
//! The crate is organised bottom-up:
//!
//! * [`datamodel`]: samples, split manifests, dataset ingestion and the toy generator
//! * [`backbone`]: toy encoders with named adapter insertion points and manual backprop
//! * [`adapter`]: the residual bottleneck adapter, tunability modes and parameter accounting
//! * [`textbank`]: prompt templates, text-embedding providers and the frozen classifier
//! * [`losses`]: softmax, classification, distillation and alignment objectives
//! * [`trainer`]: the teacher/student training loop and checkpoints
//! * [`retrieval`]: feature indexes, cosine ranking and mAP / precision evaluation
//! * [`plot`]: t-SNE, similarity heatmap and adapter-scaling figure data

pub mod adapter;
pub mod archive;
pub mod backbone;
pub mod config;
pub mod datamodel;
pub mod imaging;
pub mod losses;
pub mod numeric;
pub mod optim;
pub mod params;
pub mod plot;
pub mod retrieval;
pub mod textbank;
pub mod trainer;
pub mod tsne;

pub use adapter::{count_parameters, insert_adapters, set_tunability, AdapterPolicy, TunabilityMode};
pub use backbone::{build_encoder, EncoderFamily, EncoderSpec, EncoderState, ForwardOutput};
pub use datamodel::{generate_toy_dataset, load_manifest, validate_manifest, Domain, Sample, SplitManifest, ToySpec};
pub use losses::LossConfig;
pub use retrieval::{evaluate, FeatureIndex, MetricReport};
pub use textbank::{classifier_matrix, embed_classes, fill_template, PromptTemplate, TextBank};
pub use trainer::{train, Checkpoint, TrainConfig};
