"""Self-supervised active learning with a momentum-contrast learner and CoreSet selection."""

__version__ = "0.1.0"
