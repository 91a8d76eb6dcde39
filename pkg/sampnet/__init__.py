"""
Image composition assessment: saliency-augmented multi-pattern pooling,
attentional attribute fusion, weighted EMD training, content-bias analysis
and rater-consistency statistics.
"""
