"""
cnnldp: infinite-channel asymptotics of deep Gaussian CNNs
Covariance chains, their NNGP limit, large-deviation rates and the posterior potential
"""

__version__ = "0.1.0"
