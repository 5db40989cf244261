"""
## Description

hybridca is a small numpy implementation of hybrid convolution-attention models for
lesion severity scoring: a convolutional backbone whose feature map is refined by a
Transformer (HCT) or Hopfield (HCH) encoder-decoder, pre-trained on a multi-label proxy
task and fine-tuned on a small severity cohort.

## What This Library Includes

1. [Reverse-mode autodiff engine](hybridca/core/autodiff.html) over 64-bit numpy arrays
2. Model blocks: [attention](hybridca/nn/attention.html), [Hopfield layers](hybridca/nn/hopfield.html),
   [convolutional backbone](hybridca/nn/backbone.html) and the [assembled model](hybridca/nn/model.html)
3. [Pre-training and fine-tuning](hybridca/training/procedures.html) with AdamW / SGD
4. [Metrics](hybridca/evaluation/metrics.html) and [patient-grouped cross-validation](hybridca/evaluation/crossval.html)
5. [Synthetic datasets](hybridca/data/synthetic.html) and [manifest loading](hybridca/core/loaders.html)
6. [Gradient verification protocol](hybridca/verification/vv_protocols.html) built on the
   [V&V framework](hybridca/core/check_model.html)
7. [Yaml Configuration Interface](hybridca/config/interface.html)

## Installation

> pip install .

## CLI Commands

All commands live under the `hca` entry point:

``` bash
hca synth-data --kind target --seed 2 --n 94 --out data/target
hca pretrain --config run.yaml
hca crossval --config run.yaml --jobs 4
hca grad-check
hca report --in hca_out/crossval --out table.md
```

Without `--config` the packaged toy configuration (`config/toy_vLatest.yaml`) is used;
outputs go to `--out-dir`, the configuration's `out_dir` or `$HCA_OUT`, in that order.
"""
__version__ = "0.1.0"
