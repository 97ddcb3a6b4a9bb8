"""Online peak-power shaping for PAM over ISI channels with ADC noise."""

__version__ = "0.1.0"
