from .synthetic_corpus import *
