"""Person re-identification with metric-learned bag-of-words codebooks.

Superpixel local features (HSV, color names, HOG, SILTP) are quantized
against per-channel codebooks clustered under a learned Mahalanobis metric,
pooled into horizontal-strip histograms and ranked with an optional
descriptor-level learner (KISSME, XQDA or NFST).
"""

__version__ = "0.1.0"
