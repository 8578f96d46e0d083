"""Model extraction toolkit for low-level protocol code.

Symbolically executes stack-machine programs into process-calculus
models, abstracts message formatting into typed encoder/parser
functions, and emits CryptoVerif- and ProVerif-syntax model files.
Every transformation is validated by differential trace comparison
against a built-in concrete interpreter.
"""

__version__ = "0.1.0"
