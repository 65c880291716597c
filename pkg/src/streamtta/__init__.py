"""Forward-only test-time adaptation for streaming multichannel biosignal decoding.

The engine refines per-trial predictions of a frozen pretrained network by
forward-passing multiple label-preserving views of each test sample (input
augmentations or deterministic feature masks) and fusing the branch
predictions with learned reliability weights, under online covariance
alignment and optional batch-norm adaptation and int8 inference.
"""

__version__ = "0.1.0"
