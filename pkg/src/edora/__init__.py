"""Parameter-efficient adaptation (LoRA, DoRA, EDoRA) for EEG time-series classifiers."""

__version__ = "0.1.0"
