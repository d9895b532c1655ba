"""Semi-supervised, few-shot classification of small weld-surface defect patches.

Modules: ``imaging`` (pre-processing filters), ``dataset`` (annotations,
patches, synthetic data), ``network`` (a small numpy CNN), ``pseudolabel``
(round-based self-training), ``fewshot`` (weight imprinting + fine-tuning),
``metrics`` (confusion-matrix scores) and ``cli``.
"""
__version__ = "0.1.0"
