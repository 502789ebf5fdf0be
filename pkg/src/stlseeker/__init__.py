"""Model-based policy search for signal temporal logic tasks.

Learns a probabilistic one-step dynamics model and a recurrent control
policy for an unknown plant, directly from an STL specification, with a
control-barrier-function filter guarding every plant interaction.
"""

__version__ = "0.1.0"
