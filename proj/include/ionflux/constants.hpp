#pragma once

namespace ionflux {

// CODATA 2018 exact/recommended values, SI units.
struct PhysicalConstants {
    double faraday = 96485.33212;           // C/mol
    double gas_constant = 8.314462618;      // J/(mol K)
    double temperature = 298.15;            // K
    double elementary_charge = 1.602176634e-19;  // C
    double vacuum_permittivity = 8.8541878128e-12;  // F/m
    double boltzmann = 1.380649e-23;        // J/K

    // F/(RT), converts volts to dimensionless potential.
    double inverse_thermal_voltage() const { return faraday / (gas_constant * temperature); }
    double thermal_voltage() const { return gas_constant * temperature / faraday; }
    double thermal_energy() const { return boltzmann * temperature; }
};

}  // namespace ionflux
