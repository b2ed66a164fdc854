"""Recurrent sequence models built from scratch on dense float64 kernels.

Subpackages by concern:

* :mod:`rnnkit.linalg` — dense kernels, deterministic RNG, serialization
* :mod:`rnnkit.rnn` — vanilla RNN, BPTT, mitigation variants, losses, SGD
* :mod:`rnnkit.lstm` — LSTM cell and its historical gate variants
* :mod:`rnnkit.gru` — fully gated and minimal gated recurrent units
* :mod:`rnnkit.esn` — echo state network (fixed reservoir, linear readout)
* :mod:`rnnkit.bidir` — bidirectional RNN/LSTM and stacked embeddings
* :mod:`rnnkit.harness` — synthetic tasks, gradient checking, training loop
* :mod:`rnnkit.cli` — command-line experiment runner emitting CSV artifacts
"""

__version__ = "0.1.0"
