//! A run configuration small enough for end-to-end tests.

use std::path::Path;

use serde_json::{json, Value};

pub fn tiny_config(root: &Path) -> Value {
    json!({
        "seed": 7,
        "paths": {
            "corpus": root.join("corpus"),
            "checkpoints": root.join("ckpt"),
            "reports": root.join("reports"),
        },
        "corpus": {
            "num_sentences": 10,
            "phonemes_per_sentence": [2, 4],
            "segment_frames": [3, 5],
            "hand_roi": 16,
            "lip_roi": 24,
            "num_static": 160,
            "static_frames_per_sentence": 4
        },
        "encoder": {
            "input_size": [16, 16],
            "stem_channels": 4,
            "block_channels": [4, 8],
            "feature_dim": 8,
            "projection_dim": 4
        },
        "contrastive": { "batch_size": 8, "epochs": 2 },
        "finetune": { "epochs": 3, "labeled_fraction": 0.5, "lr": 0.001 },
        "sequence": { "d_model": 8, "heads": 2, "bilstm_layers": 1, "san_layers": 1, "epochs": 2 },
        "fusion": {
            "lip": { "d_lip": 4 },
            "pos_hidden": 4,
            "d_pos": 2,
            "sequence": { "d_model": 8, "heads": 2, "bilstm_layers": 1, "san_layers": 1, "epochs": 1 }
        },
        "xval": { "folds": 2 }
    })
}

pub fn write_tiny_config(root: &Path) -> std::path::PathBuf {
    let path = root.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&tiny_config(root)).unwrap()).unwrap();
    path
}
