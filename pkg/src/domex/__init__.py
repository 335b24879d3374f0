"""domex: domain extrapolation pipeline and generalization-bound laboratory.

Two halves share one hypothesis class:

* a simulator half (`metasim`, `hypotheses`, `training`, `bounds`) that
  instantiates a Gaussian meta-distribution over domains, trains classifiers
  on samples from a perturbed proxy of it, and checks an explicit
  generalization bound term by term, and
* a pipeline half (`orchestrator`, `synth`) that extracts novel domain names
  and generation prompts from a chat backend, synthesizes feature vectors (or
  real images over HTTP), filters them by embedding similarity, and assembles
  training sets.

`experiments` wires the halves together; `cli` exposes everything as the
`domex` command.
"""

__version__ = "0.1.0"
