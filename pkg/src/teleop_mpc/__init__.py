"""Target-augmented feedback MPC and a multi-rate bilateral teleoperation simulator.

The package is organized around the control stack it simulates:

- ``model``: plant and target dynamics, forward kinematics, linearization
- ``ocp``: tracking costs, relaxed-barrier constraints, quadratic approximations
- ``slq``: the iLQR solver producing time-varying affine feedback policies
- ``mpc``: receding-horizon runner, controller variants, fast policy evaluation
- ``teleop``: haptic device, coupling/clutch, scripted operators, force feedback
- ``sim``: deterministic discrete-event multi-rate simulation, logs and metrics
- ``config``/``cli``/``report``: experiment configs, runner front door, reporting
- ``protocol``/``bridge``: wire protocol and real-time serve mode
"""

__version__ = "0.1.0"
