# StepReg Backend Package
