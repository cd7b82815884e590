"""Scanner-invariant MS lesion segmentation at desk scale.

Subpackages cover synthetic multi-scanner data generation, multi-pathway
3D patch networks, adversarial harmonization training, and a test-retest
reproducibility evaluation harness.
"""

__version__ = "0.1.0"
