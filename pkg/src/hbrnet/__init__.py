"""Two-stage prostate MRI phantom pipeline.

Stage 1 corrects multiplicative intensity inhomogeneity on six-channel
biomarker volumes with a Hadamard-domain U-Net; Stage 2 classifies
overlapping patches with an upsampling projection plus a ResNet-18.
Everything runs on synthetic phantom cohorts with known ground truth.
"""

__version__ = "0.1.0"
